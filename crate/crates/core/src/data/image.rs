use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::BoundingBox;
use crate::error::{Error, Result};

/// Row-major 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixels {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Pixels {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty raster {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Pixels {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Single-channel intensities in `[0, 1]`, row-major. RGB is reduced with
    /// Rec. 601 luma weights.
    pub fn to_luma_f32(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f32 / 255.0).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
                .collect(),
        }
    }

    pub fn from_dynamic(img: DynamicImage) -> Result<Self> {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::new(w as usize, h as usize, 1, g.into_raw())
            }
            other if other.color().channel_count() <= 2 => {
                let g = other.to_luma8();
                let (w, h) = g.dimensions();
                Self::new(w as usize, h as usize, 1, g.into_raw())
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new(w as usize, h as usize, 3, rgb.into_raw())
            }
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, self.data.clone())
                .expect("length checked at construction");
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, self.data.clone())
                .expect("length checked at construction");
            DynamicImage::ImageRgb8(buf)
        }
    }

    /// Copies `src` into `self` with its top-left corner at `(x0, y0)`,
    /// cropping whatever falls outside. Channel counts must match.
    pub fn blit(&mut self, src: &Pixels, x0: isize, y0: isize) {
        debug_assert_eq!(self.channels, src.channels);
        let ch = self.channels;
        for sy in 0..src.height {
            let dy = y0 + sy as isize;
            if dy < 0 || dy >= self.height as isize {
                continue;
            }
            let sx_start = (-x0).max(0) as usize;
            let sx_end = (self.width as isize - x0).min(src.width as isize);
            if sx_end <= sx_start as isize {
                continue;
            }
            let sx_end = sx_end as usize;
            let dx_start = (x0 + sx_start as isize) as usize;
            let n = (sx_end - sx_start) * ch;
            let s = (sy * src.width + sx_start) * ch;
            let d = (dy as usize * self.width + dx_start) * ch;
            self.data[d..d + n].copy_from_slice(&src.data[s..s + n]);
        }
    }

    pub fn flip_horizontal(&self) -> Pixels {
        let mut out = self.clone();
        let ch = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let s = (y * self.width + x) * ch;
                let d = (y * self.width + (self.width - 1 - x)) * ch;
                out.data[d..d + ch].copy_from_slice(&self.data[s..s + ch]);
            }
        }
        out
    }

    /// Converts to the given channel count (gray <-> RGB).
    pub fn with_channels(&self, channels: usize) -> Pixels {
        if channels == self.channels {
            return self.clone();
        }
        let data = if channels == 1 {
            self.to_luma_f32()
                .into_iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        } else {
            self.data.iter().flat_map(|&v| [v, v, v]).collect()
        };
        Pixels {
            width: self.width,
            height: self.height,
            channels,
            data,
        }
    }
}

/// Pixels plus normalized ground-truth boxes; the unit every dataset
/// operation works on.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Pixels,
    pub boxes: Vec<BoundingBox>,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Pixels, boxes: Vec<BoundingBox>, source_id: impl Into<String>) -> Result<Self> {
        for b in &boxes {
            b.validate()?;
        }
        Ok(LabeledImage {
            pixels,
            boxes,
            source_id: source_id.into(),
        })
    }

    pub fn unlabeled(pixels: Pixels, source_id: impl Into<String>) -> Self {
        LabeledImage {
            pixels,
            boxes: Vec::new(),
            source_id: source_id.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}
