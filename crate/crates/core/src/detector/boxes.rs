//! Box representations, IoU and the prior-relative offset coding.

use crate::error::{Error, Result};

/// Default `(centre, size)` variances of the offset coding.
pub const DEFAULT_VARIANCES: (f64, f64) = (0.1, 0.2);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CornerBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CornerBox {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        CornerBox { xmin, ymin, xmax, ymax }
    }

    /// Checked constructor: finite coordinates and positive extent.
    pub fn try_new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = CornerBox::new(xmin, ymin, xmax, ymax);
        if !b.is_valid() {
            return Err(Error::OutOfRange(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.xmin + self.xmax),
            cy: 0.5 * (self.ymin + self.ymax),
            w: self.width(),
            h: self.height(),
        }
    }

    pub fn clip_unit(&self) -> CornerBox {
        CornerBox::new(
            self.xmin.clamp(0.0, 1.0),
            self.ymin.clamp(0.0, 1.0),
            self.xmax.clamp(0.0, 1.0),
            self.ymax.clamp(0.0, 1.0),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> CornerBox {
        CornerBox::new(self.xmin * sx, self.ymin * sy, self.xmax * sx, self.ymax * sy)
    }
}

impl CenterBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        CenterBox { cx, cy, w, h }
    }

    pub fn to_corner(&self) -> CornerBox {
        CornerBox::new(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn encode_box(gt: &CornerBox, prior: &CenterBox, variances: (f64, f64)) -> Result<[f64; 4]> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::OutOfRange(format!("ground truth box has non-positive size: {gt:?}")));
    }
    if !(prior.w > 0.0 && prior.h > 0.0) {
        return Err(Error::OutOfRange(format!("prior has non-positive size: {prior:?}")));
    }
    let g = gt.to_center();
    let (vc, vs) = variances;
    Ok([
        (g.cx - prior.cx) / (prior.w * vc),
        (g.cy - prior.cy) / (prior.h * vc),
        (g.w / prior.w).ln() / vs,
        (g.h / prior.h).ln() / vs,
    ])
}

pub fn decode_box(offsets: &[f64; 4], prior: &CenterBox, variances: (f64, f64)) -> CornerBox {
    let (vc, vs) = variances;
    CenterBox {
        cx: prior.cx + offsets[0] * vc * prior.w,
        cy: prior.cy + offsets[1] * vc * prior.h,
        w: prior.w * (offsets[2] * vs).exp(),
        h: prior.h * (offsets[3] * vs).exp(),
    }
    .to_corner()
}
