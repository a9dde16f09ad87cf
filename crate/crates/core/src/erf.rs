//! Effective receptive field of a backbone activation, estimated from the
//! input gradient of a single spatial position.

use std::path::Path;

use crate::data::{write_pgm, Dataset};
use crate::detector::model::POOL_BEFORE;
use crate::detector::{Detector, ModelConfig, Tap};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Pixels at or below this fraction of the peak do not count towards the area.
pub const ERF_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, max-normalised to `[0, 1]`.
    pub heatmap: Vec<f64>,
    /// Number of pixels above `ERF_THRESHOLD` of the peak.
    pub area: usize,
}

impl ErfMap {
    /// Sums `|grad|` over the channels of item 0 and normalises.
    pub fn from_gradient(grad: &Tensor<f32>) -> Self {
        let s = grad.shape();
        let plane = s.plane();
        let item = grad.item(0);
        let mut heat = vec![0.0f64; plane];
        for c in 0..s.c {
            for (h, g) in heat.iter_mut().zip(&item[c * plane..(c + 1) * plane]) {
                *h += (*g as f64).abs();
            }
        }
        let peak = heat.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            heat.iter_mut().for_each(|h| *h /= peak);
        }
        let area = heat.iter().filter(|&&h| h > ERF_THRESHOLD).count();
        ErfMap {
            width: s.w,
            height: s.h,
            heatmap: heat,
            area,
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.heatmap.iter().map(|h| (h * 255.0).round() as u8).collect();
        write_pgm(path, self.width, self.height, &bytes)
    }
}

/// Mean training image blended half-and-half with mid-gray, as a
/// `(1, 3, S, S)` normalised tensor. Mid-gray is 0 after normalisation.
pub fn probe_image(data: &Dataset, size: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(Shape::new(1, 3, size, size));
    let usable: Vec<usize> = (0..data.samples.len())
        .filter(|&i| data.samples[i].image.width == size && data.samples[i].image.height == size)
        .collect();
    if usable.is_empty() {
        return t;
    }
    let mut one = Tensor::zeros(Shape::new(1, 3, size, size));
    for &i in &usable {
        data.samples[i].image.write_normalized(&mut one, 0);
        t.add_assign(&one);
    }
    let k = 0.5 / usable.len() as f32;
    t.data_mut().iter_mut().for_each(|v| *v *= k);
    t
}

/// Input gradient of the channel-summed activation at `(y, x)` of `tap`.
pub fn erf_probe(model: &mut Detector<f32>, image: &Tensor<f32>, tap: Tap, y: usize, x: usize) -> Result<ErfMap> {
    if image.shape().n != 1 {
        return Err(Error::InvalidShape("erf_probe takes a single image".into()));
    }
    let g = model.tap_input_gradient(image, tap, y, x)?;
    Ok(ErfMap::from_gradient(&g))
}

/// Inclusive input rows/columns `(y0, y1, x0, x1)` that can influence the
/// tap activation at `(y, x)`, clipped to the image.
pub fn theoretical_field(cfg: &ModelConfig, tap: Tap, y: usize, x: usize) -> (usize, usize, usize, usize) {
    let specs = cfg.stage_specs();
    let (mut ya, mut yb, mut xa, mut xb) = (y as i64, y as i64, x as i64, x as i64);
    for k in (0..=tap.stage()).rev() {
        let s = &specs[k];
        let back = |a: i64, b: i64, st: usize, p: usize, d: usize, kk: usize| {
            (a * st as i64 - p as i64, b * st as i64 - p as i64 + (d * (kk - 1)) as i64)
        };
        (ya, yb) = back(ya, yb, s.stride.0, s.pad.0, s.dilation.0, s.kernel.0);
        (xa, xb) = back(xa, xb, s.stride.1, s.pad.1, s.dilation.1, s.kernel.1);
        if POOL_BEFORE[k] {
            (ya, yb, xa, xb) = (2 * ya, 2 * yb + 1, 2 * xa, 2 * xb + 1);
        }
    }
    let hi = cfg.input_size as i64 - 1;
    let c = |v: i64| v.clamp(0, hi) as usize;
    (c(ya), c(yb), c(xa), c(xb))
}

/// Centre of the tap's feature map.
pub fn center(cfg: &ModelConfig, tap: Tap) -> (usize, usize) {
    let (h, w) = cfg.tap_size(tap);
    (h / 2, w / 2)
}
