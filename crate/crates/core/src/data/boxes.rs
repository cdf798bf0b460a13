use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center format.
///
/// All coordinates are fractions of the image size. The center lies inside
/// the image and the extent is strictly positive; the box may still poke out
/// of the image, in which case [`BoundingBox::clipped`] trims it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox {
            class_id,
            cx,
            cy,
            w,
            h,
        };
        b.validate()?;
        Ok(b)
    }

    /// Single-class crater box.
    pub fn crater(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(0, cx, cy, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.cx) {
            return Err(Error::InvalidBox(format!("cx {} outside [0,1]", self.cx)));
        }
        if !(0.0..=1.0).contains(&self.cy) {
            return Err(Error::InvalidBox(format!("cy {} outside [0,1]", self.cy)));
        }
        if !(self.w > 0.0 && self.w <= 1.0) {
            return Err(Error::InvalidBox(format!("w {} outside (0,1]", self.w)));
        }
        if !(self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::InvalidBox(format!("h {} outside (0,1]", self.h)));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// `(x1, y1, x2, y2)` corners, unclipped.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Builds a box from corners after clipping them to the unit square.
    /// Returns `None` when nothing with positive extent is left.
    pub fn from_corners(class_id: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        let (w, h) = (x2 - x1, y2 - y1);
        if !(w > 0.0 && h > 0.0) {
            return None;
        }
        let b = BoundingBox {
            class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w,
            h,
        };
        b.is_valid().then_some(b)
    }

    pub fn clipped(&self) -> Option<Self> {
        let (x1, y1, x2, y2) = self.corners();
        Self::from_corners(self.class_id, x1, y1, x2, y2)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        crate::metrics::iou(self, other)
    }
}
