use image::imageops::{self, FilterType};
use image::DynamicImage;

use super::{BoundingBox, LabeledImage, Pixels};

/// Gray level used for the padding bands.
pub const PAD_VALUE: u8 = 114;

/// Geometry of a letterbox: uniform scale, then symmetric padding to a
/// `target x target` canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub target: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, target: usize) -> Self {
        assert!(target > 0 && src_w > 0 && src_h > 0);
        let s = target as f64 / src_w.max(src_h) as f64;
        let new_w = ((src_w as f64 * s).round() as usize).clamp(1, target);
        let new_h = ((src_h as f64 * s).round() as usize).clamp(1, target);
        Letterbox {
            src_w,
            src_h,
            target,
            new_w,
            new_h,
            pad_left: (target - new_w) / 2,
            pad_top: (target - new_h) / 2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src_w == self.target && self.src_h == self.target
    }

    fn map_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let t = self.target as f64;
        (
            (x * self.new_w as f64 + self.pad_left as f64) / t,
            (y * self.new_h as f64 + self.pad_top as f64) / t,
        )
    }

    fn unmap_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let t = self.target as f64;
        (
            (x * t - self.pad_left as f64) / self.new_w as f64,
            (y * t - self.pad_top as f64) / self.new_h as f64,
        )
    }

    /// Source-normalized box to target-normalized box.
    pub fn map_box(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.map_xy(b.cx, b.cy);
        let t = self.target as f64;
        BoundingBox {
            class_id: b.class_id,
            cx,
            cy,
            w: b.w * self.new_w as f64 / t,
            h: b.h * self.new_h as f64 / t,
        }
    }

    /// Inverse of [`Letterbox::map_box`].
    pub fn unmap_box(&self, b: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.unmap_xy(b.cx, b.cy);
        let t = self.target as f64;
        BoundingBox {
            class_id: b.class_id,
            cx,
            cy,
            w: b.w * t / self.new_w as f64,
            h: b.h * t / self.new_h as f64,
        }
    }

    pub fn apply_pixels(&self, px: &Pixels) -> Pixels {
        if self.is_identity() {
            return px.clone();
        }
        let resized = if px.width() == self.new_w && px.height() == self.new_h {
            px.clone()
        } else {
            let (w, h) = (self.new_w as u32, self.new_h as u32);
            let resized = match px.to_dynamic() {
                DynamicImage::ImageLuma8(g) => {
                    DynamicImage::ImageLuma8(imageops::resize(&g, w, h, FilterType::Triangle))
                }
                other => DynamicImage::ImageRgb8(imageops::resize(
                    &other.to_rgb8(),
                    w,
                    h,
                    FilterType::Triangle,
                )),
            };
            Pixels::from_dynamic(resized).expect("resize keeps a valid raster")
        };
        let mut out = Pixels::filled(self.target, self.target, px.channels(), PAD_VALUE)
            .expect("target is positive");
        out.blit(&resized, self.pad_left as isize, self.pad_top as isize);
        out
    }
}

/// Uniformly scales `image` to fit a `target x target` canvas, padding the
/// short side symmetrically; boxes follow the same transform.
pub fn letterbox_resize(image: &LabeledImage, target: usize) -> LabeledImage {
    letterbox_with_transform(image, target).0
}

pub fn letterbox_with_transform(image: &LabeledImage, target: usize) -> (LabeledImage, Letterbox) {
    let lb = Letterbox::new(image.width(), image.height(), target);
    let pixels = lb.apply_pixels(&image.pixels);
    let boxes = image
        .boxes
        .iter()
        .filter_map(|b| {
            let m = lb.map_box(b);
            if m.is_valid() {
                Some(m)
            } else {
                m.clipped()
            }
        })
        .collect();
    (
        LabeledImage {
            pixels,
            boxes,
            source_id: image.source_id.clone(),
        },
        lb,
    )
}
