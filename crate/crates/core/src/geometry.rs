//! Axis-aligned boxes, IoU, proposal deltas and centerness targets.

use thiserror::Error;

/// Default smoothing term for the centerness min/max ratios.
pub const DEFAULT_CENTERNESS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box: width {width} and height {height} must both be positive and finite")]
    Degenerate { width: f64, height: f64 },
}

/// Corner-parameterized rectangle `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (width, height) = (self.x2 - self.x1, self.y2 - self.y1);
        // NaN fails both comparisons.
        if width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::Degenerate { width, height })
        }
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

    pub fn to_center(&self) -> Result<CenterBox, GeometryError> {
        to_center(self)
    }

    /// Shift by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Box {
        Box {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Scale every coordinate by `factor` about the origin.
    pub fn scaled(&self, factor: f64) -> Box {
        Box {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }
}

/// Center-size parameterization with strictly positive extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() {
            Ok(Self { cx, cy, w, h })
        } else {
            Err(GeometryError::Degenerate { width: w, height: h })
        }
    }

    pub fn to_corners(&self) -> Box {
        Box {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Applies regression deltas the way a detector decodes them: the inverse
    /// of [`box_deltas`] with this box as the proposal.
    pub fn apply_deltas(&self, d: &BoxDeltas) -> CenterBox {
        CenterBox {
            cx: self.cx + d.dx * self.w,
            cy: self.cy + d.dy * self.h,
            w: self.w * d.dw.exp(),
            h: self.h * d.dh.exp(),
        }
    }
}

/// Normalized offsets between a ground-truth box and a proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub const ZERO: BoxDeltas = BoxDeltas {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

pub fn to_center(b: &Box) -> Result<CenterBox, GeometryError> {
    b.validate()?;
    Ok(CenterBox {
        cx: (b.x1 + b.x2) / 2.0,
        cy: (b.y1 + b.y2) / 2.0,
        w: b.x2 - b.x1,
        h: b.y2 - b.y1,
    })
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Offsets of `gt` relative to proposal `p`, normalized by the proposal size.
pub fn box_deltas(gt: &CenterBox, p: &CenterBox) -> BoxDeltas {
    BoxDeltas {
        dx: (gt.cx - p.cx) / p.w,
        dy: (gt.cy - p.cy) / p.h,
        dw: (gt.w / p.w).ln(),
        dh: (gt.h / p.h).ln(),
    }
}

/// Centerness target from proposal deltas.
///
/// Returns `None` when any delta is negative; such proposals are dropped from
/// the centerness loss. Both sides of each min/max ratio carry `eps`, so a
/// perfectly aligned proposal (all deltas zero) scores exactly 1.
pub fn centerness_target(d: &BoxDeltas, eps: f64) -> Option<f64> {
    if d.to_array().iter().any(|&v| v < 0.0 || v.is_nan()) {
        return None;
    }
    let ratio = |a: f64, b: f64| (a.min(b) + eps) / (a.max(b) + eps);
    let target = (ratio(d.dx, d.dy) * ratio(d.dw, d.dh)).sqrt();
    Some(target.clamp(0.0, 1.0))
}

/// Convenience: centerness target of proposal `p` against ground truth `gt`.
pub fn centerness_for_boxes(gt: &Box, p: &Box, eps: f64) -> Result<Option<f64>, GeometryError> {
    let d = box_deltas(&to_center(gt)?, &to_center(p)?);
    Ok(centerness_target(&d, eps))
}
