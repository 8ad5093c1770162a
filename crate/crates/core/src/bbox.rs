//! Axis-aligned boxes in pixel coordinates.
//!
//! Boxes use the corner convention `[x1, y1, x2, y2]` with the origin at the
//! top-left of the image; area is `(x2 - x1) * (y2 - y1)`. Coordinates are
//! floating point because detectors emit sub-pixel boxes; rasterization
//! happens by rounding at crop time.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}] (need x1 < x2 and y1 < y2)"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners, sorting them into corner order.
    pub fn from_corners(ax: f64, ay: f64, bx: f64, by: f64) -> Result<Self> {
        Self::new(ax.min(bx), ay.min(by), ax.max(bx), ay.max(by))
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn is_within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    pub fn ensure_within(&self, width: u32, height: u32) -> Result<()> {
        if self.is_within(width, height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                bbox: self.to_string(),
                width,
                height,
            })
        }
    }

    /// Clips the box to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let x1 = self.x1.clamp(0.0, width as f64);
        let y1 = self.y1.clamp(0.0, height as f64);
        let x2 = self.x2.clamp(0.0, width as f64);
        let y2 = self.y2.clamp(0.0, height as f64);
        BoundingBox::new(x1, y1, x2, y2).ok()
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Result<BoundingBox> {
        BoundingBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Integer pixel rectangle `(x, y, w, h)` used when cropping rasters.
    pub fn pixel_rect(&self) -> (i64, i64, i64, i64) {
        let x = self.x1.round() as i64;
        let y = self.y1.round() as i64;
        let w = self.width().round() as i64;
        let h = self.height().round() as i64;
        (x, y, w, h)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}
