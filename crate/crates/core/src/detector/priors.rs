//! Default boxes tiled over the prediction maps.

use super::boxes::{CenterBox, DEFAULT_VARIANCES};
use super::model::ModelConfig;
use crate::error::{Error, Result};

/// Prior geometry of one prediction map.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorLayer {
    pub fmap_h: usize,
    pub fmap_w: usize,
    pub scale: f64,
    /// Scale of the next (deeper) layer; the extra unit-ratio box uses
    /// `sqrt(scale * next_scale)`.
    pub next_scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl PriorLayer {
    /// Boxes per cell: one per ratio plus the extra unit-ratio box.
    pub fn shapes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + 1
    }

    pub fn count(&self) -> usize {
        self.fmap_h * self.fmap_w * self.shapes_per_cell()
    }

    /// `(w, h)` of every shape in cell order. The extra box follows the
    /// first unit ratio, or comes last when there is none.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let s = (self.scale * self.next_scale).sqrt();
        let mut out: Vec<(f64, f64)> = self
            .aspect_ratios
            .iter()
            .map(|&a| (self.scale * a.sqrt(), self.scale / a.sqrt()))
            .collect();
        match self.aspect_ratios.iter().position(|&a| a == 1.0) {
            Some(i) => out.insert(i + 1, (s, s)),
            None => out.push((s, s)),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    /// Ordered (layer, row, col, shape).
    pub boxes: Vec<CenterBox>,
    pub variances: (f64, f64),
    /// Index of the first prior of every layer, plus the total at the end.
    pub offsets: Vec<usize>,
    pub layers: Vec<PriorLayer>,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn priors_for_layers(layers: &[PriorLayer], variances: (f64, f64)) -> Result<PriorSet> {
    let mut boxes = Vec::new();
    let mut offsets = Vec::with_capacity(layers.len() + 1);
    for (k, l) in layers.iter().enumerate() {
        if l.aspect_ratios.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("prior layer {k}: aspect ratios must be positive")));
        }
        if !(l.scale > 0.0) || l.fmap_h == 0 || l.fmap_w == 0 {
            return Err(Error::Config(format!("prior layer {k}: empty map or non-positive scale")));
        }
        offsets.push(boxes.len());
        let shapes = l.shapes();
        for i in 0..l.fmap_h {
            let cy = (i as f64 + 0.5) / l.fmap_h as f64;
            for j in 0..l.fmap_w {
                let cx = (j as f64 + 0.5) / l.fmap_w as f64;
                boxes.extend(shapes.iter().map(|&(w, h)| CenterBox::new(cx, cy, w, h)));
            }
        }
    }
    offsets.push(boxes.len());
    Ok(PriorSet {
        boxes,
        variances,
        offsets,
        layers: layers.to_vec(),
    })
}

/// Priors of the detector described by `cfg`.
pub fn generate_priors(cfg: &ModelConfig) -> Result<PriorSet> {
    cfg.validate()?;
    let n = cfg.pred_taps.len();
    let layers: Vec<PriorLayer> = cfg
        .pred_taps
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (h, w) = cfg.tap_size(t.tap);
            PriorLayer {
                fmap_h: h,
                fmap_w: w,
                scale: t.scale,
                next_scale: if k + 1 < n { cfg.pred_taps[k + 1].scale } else { cfg.max_scale },
                aspect_ratios: t.aspect_ratios.clone(),
            }
        })
        .collect();
    priors_for_layers(&layers, cfg.variances)
}

impl Default for PriorSet {
    fn default() -> Self {
        PriorSet {
            boxes: Vec::new(),
            variances: DEFAULT_VARIANCES,
            offsets: vec![0],
            layers: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    fn layer(f: usize, scale: f64, ratios: &[f64]) -> PriorLayer {
        PriorLayer {
            fmap_h: f,
            fmap_w: f,
            scale,
            next_scale: scale,
            aspect_ratios: ratios.to_vec(),
        }
    }

    #[test]
    fn count_two_by_two() {
        let p = priors_for_layers(&[layer(2, 0.3, &[1.0, 2.0])], DEFAULT_VARIANCES).unwrap();
        assert_eq!(p.len(), 12);
    }

    #[test]
    fn single_cell_unit_box() {
        let p = priors_for_layers(&[layer(1, 0.5, &[1.0])], DEFAULT_VARIANCES).unwrap();
        assert_eq!(p.boxes[0], CenterBox::new(0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn shape_geometry() {
        let l = PriorLayer {
            next_scale: 0.4,
            ..layer(1, 0.1, &[1.0, 2.0, 0.5])
        };
        let s = l.shapes();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], (0.1, 0.1));
        assert!((s[1].0 - 0.2).abs() < 1e-15 && (s[1].1 - 0.2).abs() < 1e-15);
        assert!((s[2].0 / s[2].1 - 2.0).abs() < 1e-12);
        assert!((s[3].1 / s[3].0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_config_has_846_priors() {
        let cfg = ModelConfig::default();
        let p = generate_priors(&cfg).unwrap();
        assert_eq!(p.len(), 144 * 4 + 36 * 6 + 9 * 6);
        assert_eq!(p.offsets, vec![0, 576, 792, 846]);
    }

    #[test]
    fn order_is_layer_row_col_shape() {
        let p = priors_for_layers(&[layer(2, 0.2, &[1.0, 2.0]), layer(1, 0.6, &[1.0])], DEFAULT_VARIANCES).unwrap();
        // second row, first column, third shape of layer 0
        let b = p.boxes[(2 * 3) + 2];
        assert_eq!((b.cx, b.cy), (0.25, 0.75));
        assert_eq!(p.boxes[12].cx, 0.5);
    }

    #[test]
    fn count_formula_on_random_configs() {
        let mut rng = seeded_rng(8);
        for _ in 0..50 {
            let layers: Vec<PriorLayer> = (0..rng.gen_range(1..5))
                .map(|_| {
                    let ratios: Vec<f64> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0.2..4.0)).collect();
                    PriorLayer {
                        fmap_h: rng.gen_range(1..10),
                        fmap_w: rng.gen_range(1..10),
                        scale: rng.gen_range(0.05..0.9),
                        next_scale: rng.gen_range(0.05..1.0),
                        aspect_ratios: ratios,
                    }
                })
                .collect();
            let want: usize = layers
                .iter()
                .map(|l| l.fmap_h * l.fmap_w * (l.aspect_ratios.len() + 1))
                .sum();
            assert_eq!(priors_for_layers(&layers, DEFAULT_VARIANCES).unwrap().len(), want);
        }
    }
}
