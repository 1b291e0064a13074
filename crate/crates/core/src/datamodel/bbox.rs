use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x, y, w, h)` in pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn mean_side(&self) -> f64 {
        (self.w + self.h) / 2.0
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox { x: self.x + dx, y: self.y + dy, ..*self }
    }

    pub fn scale(&self, s: f64) -> Self {
        BBox { x: self.x * s, y: self.y * s, w: self.w * s, h: self.h * s }
    }

    /// Intersection with the image rectangle, `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        // Boxes already inside keep their exact extents.
        if self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height && self.w > 0.0 && self.h > 0.0 {
            return Some(*self);
        }
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        (x1 > x0 && y1 > y0).then(|| BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    /// Plain intersection-over-union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            (inter / union).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Length of the box diagonal, `sqrt(w² + h²)`.
pub fn box_diagonal(b: &BBox) -> Result<f64> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Parameter(format!("box {b:?} has a nonpositive extent")));
    }
    Ok(b.w.hypot(b.h))
}
