//! Axis-aligned boxes, IoU and generalized IoU.
//!
//! Boxes are stored corner-form ([`BBox`]); detectors emit center-form
//! ([`CenterBox`]) which is converted at the boundary. Zero-area boxes are
//! legal and simply contribute no area.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Invalid(format!("malformed box {self:?}")));
        }
        Ok(())
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

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips every coordinate into `[0, 1]`.
    pub fn clipped_unit(&self) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    /// Sum of absolute coordinate differences.
    pub fn l1(&self, other: &BBox) -> f64 {
        (self.x1 - other.x1).abs()
            + (self.y1 - other.y1).abs()
            + (self.x2 - other.x2).abs()
            + (self.y2 - other.y2).abs()
    }
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::Invalid(format!("malformed center box ({cx}, {cy}, {w}, {h})")));
        }
        Ok(CenterBox { cx, cy, w, h })
    }

    pub fn to_corners(&self) -> BBox {
        BBox {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn enclosing_area(a: &BBox, b: &BBox) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU together with a degeneracy flag.
///
/// When the enclosing box has zero area (both boxes degenerate and
/// collinear or coincident) the value is defined as 0 and the flag is set.
pub fn giou_flagged(a: &BBox, b: &BBox) -> (f64, bool) {
    let enclosing = enclosing_area(a, b);
    if enclosing <= 0.0 {
        return (0.0, true);
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    (iou - (enclosing - union) / enclosing, false)
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_flagged(a, b).0
}

/// `[preds.len() x gts.len()]` matrix of GIoU values.
pub fn pairwise_giou(preds: &[BBox], gts: &[BBox]) -> Matrix {
    Matrix::from_fn(preds.len(), gts.len(), |i, j| giou(&preds[i], &gts[j]))
}

/// Box operations recorded on a tape, for losses that train box heads.
/// Boxes are `[n x 4]` matrices, one box per row.
pub mod diff {
    use super::*;

    /// `(cx, cy, w, h)` rows to `(x1, y1, x2, y2)` rows.
    pub fn center_to_corners(t: &mut Tape, boxes: Var) -> Result<Var> {
        let cx = t.slice(boxes, 1, 0, 1)?;
        let cy = t.slice(boxes, 1, 1, 2)?;
        let w = t.slice(boxes, 1, 2, 3)?;
        let h = t.slice(boxes, 1, 3, 4)?;
        let hw = t.scale(w, 0.5)?;
        let hh = t.scale(h, 0.5)?;
        let x1 = t.sub(cx, hw)?;
        let y1 = t.sub(cy, hh)?;
        let x2 = t.add(cx, hw)?;
        let y2 = t.add(cy, hh)?;
        t.concat(&[x1, y1, x2, y2], 1)
    }

    /// Per-row L1 distance, `[n x 1]`.
    pub fn l1_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d = t.sub(a, b)?;
        let ad = t.abs(d)?;
        t.sum_axis(ad, 1)
    }

    /// Per-row GIoU between corner-form boxes, `[n x 1]`.
    ///
    /// Requires every pair to have a positive union area.
    pub fn giou_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let col = |t: &mut Tape, v: Var, c: usize| t.slice(v, 1, c, c + 1);
        let (ax1, ay1, ax2, ay2) = (col(t, a, 0)?, col(t, a, 1)?, col(t, a, 2)?, col(t, a, 3)?);
        let (bx1, by1, bx2, by2) = (col(t, b, 0)?, col(t, b, 1)?, col(t, b, 2)?, col(t, b, 3)?);

        let aw = t.sub(ax2, ax1)?;
        let ah = t.sub(ay2, ay1)?;
        let area_a = t.mul(aw, ah)?;
        let bw = t.sub(bx2, bx1)?;
        let bh = t.sub(by2, by1)?;
        let area_b = t.mul(bw, bh)?;

        let ix1 = t.maximum(ax1, bx1)?;
        let iy1 = t.maximum(ay1, by1)?;
        let ix2 = t.minimum(ax2, bx2)?;
        let iy2 = t.minimum(ay2, by2)?;
        let iw = t.sub(ix2, ix1)?;
        let iw = t.clamp(iw, 0.0, f64::INFINITY)?;
        let ih = t.sub(iy2, iy1)?;
        let ih = t.clamp(ih, 0.0, f64::INFINITY)?;
        let inter = t.mul(iw, ih)?;

        let sum = t.add(area_a, area_b)?;
        let union = t.sub(sum, inter)?;
        let iou = t.div(inter, union)?;

        let ex1 = t.minimum(ax1, bx1)?;
        let ey1 = t.minimum(ay1, by1)?;
        let ex2 = t.maximum(ax2, bx2)?;
        let ey2 = t.maximum(ay2, by2)?;
        let ew = t.sub(ex2, ex1)?;
        let eh = t.sub(ey2, ey1)?;
        let enclosing = t.mul(ew, eh)?;
        let gap = t.sub(enclosing, union)?;
        let penalty = t.div(gap, enclosing)?;
        t.sub(iou, penalty)
    }
}
