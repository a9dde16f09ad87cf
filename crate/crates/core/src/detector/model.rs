//! Backbone, optional fusion module and prediction heads.
//!
//! Backbone (every conv is 3×3 followed by ReLU; taps are post-ReLU):
//!
//! ```text
//! conv1 -> pool -> conv2 -> pool -> conv3a -> pool -> conv4a -> pool
//!       -> conv5a -> fc6a (dilated) -> extra (stride 2)
//! ```

use rand::Rng;

use super::boxes::{decode_box, CornerBox, DEFAULT_VARIANCES};
use super::nms::{nms, score_order, Detection, DEFAULT_NMS_IOU, DEFAULT_TOP_K};
use super::priors::{generate_priors, PriorSet};
use super::Tap;
use crate::error::{Error, Result};
use crate::fusion::{fusion_cost, FusionCache, FusionConfig, FusionMode, FusionModule};
use crate::init::seeded_rng;
use crate::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_inplace, Conv2d, Conv2dSpec, ConvCache, PoolCache,
};
use crate::tensor::{Param, Scalar, Shape, Tensor};

pub(crate) const STAGE_NAMES: [&str; 7] = ["conv1", "conv2", "conv3a", "conv4a", "conv5a", "fc6a", "extra"];
/// Whether a 2×2 max pool precedes each stage.
pub(crate) const POOL_BEFORE: [bool; 7] = [false, true, true, true, true, false, false];

#[derive(Clone, Debug, PartialEq)]
pub struct PredTap {
    pub tap: Tap,
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectConfig {
    /// Per-category score must be strictly above this to be kept.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.01,
            nms_iou: DEFAULT_NMS_IOU,
            top_k: DEFAULT_TOP_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels; must be a multiple of 16.
    pub input_size: usize,
    /// Output channels of conv1, conv2, conv3a, conv4a, conv5a.
    pub stage_channels: Vec<usize>,
    pub fc6_channels: usize,
    pub fc6_dilation: usize,
    pub extra_channels: usize,
    /// Prediction sources, shallow to deep.
    pub pred_taps: Vec<PredTap>,
    /// Scale used for the extra box of the deepest prediction tap.
    pub max_scale: f64,
    pub num_categories: usize,
    pub variances: (f64, f64),
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let wide = vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];
        ModelConfig {
            input_size: 96,
            stage_channels: vec![16, 32, 64, 64, 64],
            fc6_channels: 64,
            fc6_dilation: 2,
            extra_channels: 64,
            pred_taps: vec![
                PredTap {
                    tap: Tap::Conv4a,
                    scale: 0.08,
                    aspect_ratios: vec![1.0, 2.0, 0.5],
                },
                PredTap {
                    tap: Tap::Fc6a,
                    scale: 0.3,
                    aspect_ratios: wide.clone(),
                },
                PredTap {
                    tap: Tap::Extra,
                    scale: 0.55,
                    aspect_ratios: wide,
                },
            ],
            max_scale: 0.8,
            num_categories: 5,
            variances: DEFAULT_VARIANCES,
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_fusion(mut self, fusion: FusionConfig) -> Self {
        self.fusion = fusion;
        self
    }

    /// Background plus categories.
    pub fn num_classes(&self) -> usize {
        self.num_categories + 1
    }

    pub fn fused(&self) -> bool {
        self.fusion.mode != FusionMode::None
    }

    pub fn stage_specs(&self) -> [Conv2dSpec; 7] {
        let c = &self.stage_channels;
        let d = self.fc6_dilation;
        [
            Conv2dSpec::new(3, c[0], 3).pad(1),
            Conv2dSpec::new(c[0], c[1], 3).pad(1),
            Conv2dSpec::new(c[1], c[2], 3).pad(1),
            Conv2dSpec::new(c[2], c[3], 3).pad(1),
            Conv2dSpec::new(c[3], c[4], 3).pad(1),
            Conv2dSpec::new(c[4], self.fc6_channels, 3).pad(d).dilation(d),
            Conv2dSpec::new(self.fc6_channels, self.extra_channels, 3).pad(1).stride(2),
        ]
    }

    /// Spatial side of every stage output.
    pub fn stage_sizes(&self) -> [usize; 7] {
        let s = self.input_size;
        let deep = s / 16;
        [s, s / 2, s / 4, s / 8, deep, deep, (deep + 1) / 2]
    }

    pub fn tap_size(&self, tap: Tap) -> (usize, usize) {
        let s = self.stage_sizes()[tap.stage()];
        (s, s)
    }

    pub fn tap_channels(&self, tap: Tap) -> usize {
        self.stage_specs()[tap.stage()].out_channels
    }

    /// Channels of the map feeding prediction tap `k`.
    pub fn head_input_channels(&self, k: usize) -> usize {
        let tap = self.pred_taps[k].tap;
        if tap == Tap::Conv4a && self.fused() {
            self.fusion.output_channels()
        } else {
            self.tap_channels(tap)
        }
    }

    pub fn head_name(&self, k: usize) -> String {
        let tap = self.pred_taps[k].tap;
        if tap == Tap::Conv4a && self.fused() {
            "head.fused".into()
        } else {
            format!("head.{tap}")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.iter().any(|&c| c == 0) {
            return bad("stage_channels needs five positive entries".into());
        }
        if self.fc6_channels == 0 || self.extra_channels == 0 || self.fc6_dilation == 0 {
            return bad("fc6/extra channels and dilation must be positive".into());
        }
        if self.num_categories == 0 {
            return bad("num_categories must be positive".into());
        }
        if self.pred_taps.is_empty() {
            return bad("at least one prediction tap is required".into());
        }
        for (k, t) in self.pred_taps.iter().enumerate() {
            if t.aspect_ratios.is_empty() {
                return bad(format!("prediction tap {} has no prior shapes", t.tap));
            }
            if !(t.scale > 0.0 && t.scale.is_finite()) {
                return bad(format!("prediction tap {} has an invalid scale", t.tap));
            }
            if k > 0 {
                let prev = &self.pred_taps[k - 1];
                if t.tap <= prev.tap {
                    return bad("prediction taps must be listed shallow to deep without repeats".into());
                }
                if t.scale <= prev.scale {
                    return bad("prior scales must strictly increase with depth".into());
                }
            }
        }
        if !(self.max_scale >= self.pred_taps.last().map_or(0.0, |t| t.scale)) {
            return bad("max_scale must not be below the deepest prior scale".into());
        }
        if !(self.variances.0 > 0.0 && self.variances.1 > 0.0) {
            return bad("variances must be positive".into());
        }
        if self.fused() {
            self.fusion.validate()?;
            if !self.pred_taps.iter().any(|t| t.tap == Tap::Conv4a) {
                return bad("fusion replaces the conv4a prediction tap, which is not configured".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Head<T: Scalar = f32> {
    /// One 3×3 conv emitting `shapes · (4 + classes)` channels: all box
    /// offsets first, then all class logits.
    pub conv: Conv2d<T>,
    pub shapes: usize,
}

#[derive(Clone, Debug)]
pub struct StageCache<T: Scalar> {
    pool: Option<PoolCache>,
    conv: ConvCache<T>,
    out: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T: Scalar> {
    stages: Vec<StageCache<T>>,
}

impl<T: Scalar> BackboneCache<T> {
    pub fn tap(&self, tap: Tap) -> &Tensor<T> {
        &self.stages[tap.stage()].out
    }
}

#[derive(Clone, Debug)]
pub struct DetectorCache<T: Scalar> {
    pub backbone: BackboneCache<T>,
    fusion: Option<FusionCache<T>>,
    heads: Vec<ConvCache<T>>,
    batch: usize,
}

/// Head outputs rearranged into prior order.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput<T: Scalar = f32> {
    /// `(batch, prior, 4)`
    pub loc: Vec<T>,
    /// `(batch, prior, classes)`
    pub conf: Vec<T>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct Detector<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub backbone: Vec<Conv2d<T>>,
    pub fusion: Option<FusionModule<T>>,
    pub heads: Vec<Head<T>>,
    pub priors: PriorSet,
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Detector<T> {
    /// Xavier-initialised detector; the fusion deconv starts bilinear and
    /// the norm scales at their configured constants.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let backbone: Vec<Conv2d<T>> = cfg
            .stage_specs()
            .into_iter()
            .zip(STAGE_NAMES)
            .map(|(spec, name)| Conv2d::new(name, spec, &mut rng))
            .collect();
        let fusion = if cfg.fused() {
            let channels: Vec<usize> = cfg.fusion.layers.taps().iter().map(|&t| cfg.tap_channels(t)).collect();
            Some(FusionModule::new(cfg.fusion, &channels, &mut rng)?)
        } else {
            None
        };
        let heads = Self::build_heads(&cfg, &mut rng);
        let priors = generate_priors(&cfg)?;
        Ok(Detector {
            cfg,
            backbone,
            fusion,
            heads,
            priors,
        })
    }

    fn build_heads<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Vec<Head<T>> {
        (0..cfg.pred_taps.len())
            .map(|k| {
                let shapes = cfg.pred_taps[k].aspect_ratios.len() + 1;
                let spec = Conv2dSpec::new(cfg.head_input_channels(k), shapes * (4 + cfg.num_classes()), 3).pad(1);
                Head {
                    conv: Conv2d::new(&cfg.head_name(k), spec, rng),
                    shapes,
                }
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = self.backbone.iter().flat_map(|c| c.params()).collect();
        if let Some(f) = &self.fusion {
            out.extend(f.params());
        }
        out.extend(self.heads.iter().flat_map(|h| h.conv.params()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = self.backbone.iter_mut().flat_map(|c| c.params_mut()).collect();
        if let Some(f) = &mut self.fusion {
            out.extend(f.params_mut());
        }
        out.extend(self.heads.iter_mut().flat_map(|h| h.conv.params_mut()));
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.shape().numel()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let want = Shape::new(s.n, 3, self.cfg.input_size, self.cfg.input_size);
        if s != want {
            return Err(Error::ShapeMismatch {
                op: "detector input",
                left: want,
                right: s,
            });
        }
        Ok(())
    }

    /// Runs the backbone through stage `last` (inclusive).
    fn backbone_until(&self, x: &Tensor<T>, last: usize) -> Result<BackboneCache<T>> {
        self.check_input(x)?;
        let mut stages: Vec<StageCache<T>> = Vec::with_capacity(last + 1);
        for (k, conv) in self.backbone.iter().enumerate().take(last + 1) {
            let src = if k == 0 { x } else { &stages[k - 1].out };
            let (pooled, pool) = if POOL_BEFORE[k] {
                let (p, c) = maxpool2_forward(src)?;
                (Some(p), Some(c))
            } else {
                (None, None)
            };
            let (mut out, cache) = conv.forward(pooled.as_ref().unwrap_or(src))?;
            relu_inplace(&mut out);
            stages.push(StageCache { pool, conv: cache, out });
        }
        Ok(BackboneCache { stages })
    }

    pub fn backbone_forward(&self, x: &Tensor<T>) -> Result<BackboneCache<T>> {
        self.backbone_until(x, STAGE_NAMES.len() - 1)
    }

    /// Backbone forward stopping at `tap`; enough for probing that tap.
    pub fn backbone_forward_to(&self, x: &Tensor<T>, tap: Tap) -> Result<BackboneCache<T>> {
        self.backbone_until(x, tap.stage())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(DetectorOutput<T>, DetectorCache<T>)> {
        let bb = self.backbone_forward(x)?;
        let (fused, fusion_cache) = match &self.fusion {
            Some(f) => {
                let srcs: Vec<&Tensor<T>> = f.cfg.layers.taps().iter().map(|&t| bb.tap(t)).collect();
                let (y, c) = f.forward(&srcs)?;
                (Some(y), Some(c))
            }
            None => (None, None),
        };
        let n = x.shape().n;
        let np = self.priors.len();
        let nc = self.cfg.num_classes();
        let mut out = DetectorOutput {
            loc: vec![T::zero(); n * np * 4],
            conf: vec![T::zero(); n * np * nc],
            batch: n,
        };
        let mut heads = Vec::with_capacity(self.heads.len());
        for (k, head) in self.heads.iter().enumerate() {
            let tap = self.cfg.pred_taps[k].tap;
            let src = match (&fused, tap) {
                (Some(f), Tap::Conv4a) => f,
                _ => bb.tap(tap),
            };
            let (y, cache) = head.conv.forward(src)?;
            self.scatter_head(k, &y, &mut out);
            heads.push(cache);
        }
        Ok((
            out,
            DetectorCache {
                backbone: bb,
                fusion: fusion_cache,
                heads,
                batch: n,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<DetectorOutput<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Visits every `(image, prior, channel-of-loc, channel-of-conf-base)`
    /// position of head `k`.
    fn head_layout(&self, k: usize, s: Shape, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let shapes = self.heads[k].shapes;
        let nc = self.cfg.num_classes();
        let base = self.priors.offsets[k];
        for i in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    for sh in 0..shapes {
                        let prior = base + (y * s.w + x) * shapes + sh;
                        let pix = y * s.w + x;
                        f(i, prior, pix, sh * 4, shapes * 4 + sh * nc);
                    }
                }
            }
        }
    }

    fn scatter_head(&self, k: usize, y: &Tensor<T>, out: &mut DetectorOutput<T>) {
        let s = y.shape();
        let (np, nc, plane) = (self.priors.len(), self.cfg.num_classes(), s.h * s.w);
        let data = y.data();
        self.head_layout(k, s, |i, prior, pix, lc, cc| {
            let img = &data[i * s.c * plane..];
            for d in 0..4 {
                out.loc[(i * np + prior) * 4 + d] = img[(lc + d) * plane + pix];
            }
            for c in 0..nc {
                out.conf[(i * np + prior) * nc + c] = img[(cc + c) * plane + pix];
            }
        });
    }

    fn gather_head_grad(&self, k: usize, s: Shape, dloc: &[T], dconf: &[T]) -> Tensor<T> {
        let (np, nc, plane) = (self.priors.len(), self.cfg.num_classes(), s.h * s.w);
        let mut g = Tensor::zeros(s);
        let data = g.data_mut();
        self.head_layout(k, s, |i, prior, pix, lc, cc| {
            let img = &mut data[i * s.c * plane..];
            for d in 0..4 {
                img[(lc + d) * plane + pix] = dloc[(i * np + prior) * 4 + d];
            }
            for c in 0..nc {
                img[(cc + c) * plane + pix] = dconf[(i * np + prior) * nc + c];
            }
        });
        g
    }

    /// Accumulates parameter gradients given gradients w.r.t. the prior-
    /// ordered outputs.
    pub fn backward(&mut self, cache: &DetectorCache<T>, dloc: &[T], dconf: &[T]) {
        let np = self.priors.len();
        assert_eq!(dloc.len(), cache.batch * np * 4, "detector backward: bad dloc length");
        assert_eq!(
            dconf.len(),
            cache.batch * np * self.cfg.num_classes(),
            "detector backward: bad dconf length"
        );
        let mut tap_grads: Vec<Option<Tensor<T>>> = vec![None; STAGE_NAMES.len()];
        let mut dfused: Option<Tensor<T>> = None;
        for k in 0..self.heads.len() {
            let s = self.head_output_shape(k, cache.batch);
            let dout = self.gather_head_grad(k, s, dloc, dconf);
            let g = self.heads[k]
                .conv
                .backward(&cache.heads[k], &dout, true)
                .expect("dx requested");
            let tap = self.cfg.pred_taps[k].tap;
            if tap == Tap::Conv4a && self.fusion.is_some() {
                add_into(&mut dfused, g);
            } else {
                add_into(&mut tap_grads[tap.stage()], g);
            }
        }
        if let (Some(f), Some(fc), Some(g)) = (&mut self.fusion, &cache.fusion, dfused) {
            let taps = f.cfg.layers.taps();
            for (t, g) in taps.iter().zip(f.backward(fc, &g)) {
                add_into(&mut tap_grads[t.stage()], g);
            }
        }
        self.backbone_backward(&cache.backbone, tap_grads, false);
    }

    fn head_output_shape(&self, k: usize, n: usize) -> Shape {
        let (h, w) = self.cfg.tap_size(self.cfg.pred_taps[k].tap);
        Shape::new(n, self.heads[k].conv.spec.out_channels, h, w)
    }

    /// Backpropagates per-stage output gradients (indexed by stage) through
    /// the backbone, returning the input gradient when asked.
    pub fn backbone_backward(
        &mut self,
        cache: &BackboneCache<T>,
        mut grads: Vec<Option<Tensor<T>>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        grads.resize(STAGE_NAMES.len(), None);
        let mut g: Option<Tensor<T>> = None;
        for k in (0..cache.stages.len()).rev() {
            if let Some(extra) = grads[k].take() {
                add_into(&mut g, extra);
            }
            let Some(gk) = g.take() else { continue };
            let st = &cache.stages[k];
            let gk = relu_backward(&st.out, &gk);
            let dx = self.backbone[k].backward(&st.conv, &gk, k > 0 || need_input);
            g = dx.map(|d| match &st.pool {
                Some(pc) => maxpool2_backward(pc, &d),
                None => d,
            });
        }
        g
    }

    /// Input gradient of `Σ tap(tap)[:, :, y, x]` over all channels.
    pub fn tap_input_gradient(&mut self, x: &Tensor<T>, tap: Tap, y: usize, xx: usize) -> Result<Tensor<T>> {
        let cache = self.backbone_forward_to(x, tap)?;
        let s = cache.tap(tap).shape();
        if y >= s.h || xx >= s.w {
            return Err(Error::OutOfRange(format!(
                "position ({y}, {xx}) outside {tap} map of {}×{}",
                s.h, s.w
            )));
        }
        let mut seed = Tensor::zeros(s);
        for i in 0..s.n {
            for c in 0..s.c {
                seed.set(i, c, y, xx, T::one());
            }
        }
        let mut grads = vec![None; STAGE_NAMES.len()];
        grads[tap.stage()] = Some(seed);
        Ok(self.backbone_backward(&cache, grads, true).expect("input gradient requested"))
    }

    /// Detections for every image of the batch.
    pub fn detect(&self, images: &Tensor<T>, dcfg: &DetectConfig) -> Result<Vec<Vec<Detection>>> {
        let out = self.infer(images)?;
        let np = self.priors.len();
        let nc = self.cfg.num_classes();
        Ok((0..out.batch)
            .map(|i| {
                decode_detections(
                    &out.loc[i * np * 4..(i + 1) * np * 4],
                    &out.conf[i * np * nc..(i + 1) * np * nc],
                    &self.priors,
                    nc,
                    dcfg,
                )
            })
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            spec: c.spec,
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
        };
        Detector {
            cfg: self.cfg.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            fusion: self.fusion.as_ref().map(|f| f.cast()),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    conv: conv(&h.conv),
                    shapes: h.shapes,
                })
                .collect(),
            priors: self.priors.clone(),
        }
    }
}

/// Softmax, box decoding, per-category thresholding and NMS for one image.
/// Result is sorted by descending score and capped at `top_k`.
pub fn decode_detections<T: Scalar>(
    loc: &[T],
    conf: &[T],
    priors: &PriorSet,
    num_classes: usize,
    dcfg: &DetectConfig,
) -> Vec<Detection> {
    let np = priors.len();
    let mut probs = vec![0.0f64; np * num_classes];
    for p in 0..np {
        let logits = &conf[p * num_classes..(p + 1) * num_classes];
        let m = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let row = &mut probs[p * num_classes..(p + 1) * num_classes];
        let mut z = 0.0;
        for (r, l) in row.iter_mut().zip(logits) {
            *r = (l.as_f64() - m).exp();
            z += *r;
        }
        row.iter_mut().for_each(|r| *r /= z);
    }
    let mut boxes: Vec<Option<CornerBox>> = vec![None; np];
    let mut all = Vec::new();
    for c in 1..num_classes {
        let mut cands = Vec::new();
        for p in 0..np {
            let score = probs[p * num_classes + c];
            if score > dcfg.score_threshold {
                let b = *boxes[p].get_or_insert_with(|| {
                    let o = [0, 1, 2, 3].map(|d| loc[p * 4 + d].as_f64());
                    decode_box(&o, &priors.boxes[p], priors.variances).clip_unit()
                });
                cands.push(Detection {
                    category: c - 1,
                    score,
                    bbox: b,
                });
            }
        }
        all.extend(nms(&cands, dcfg.nms_iou, dcfg.top_k));
    }
    let order = score_order(&all);
    order.into_iter().take(dcfg.top_k).map(|i| all[i]).collect()
}

/// Detections for a single `(1, 3, S, S)` image.
pub fn detect_forward<T: Scalar>(image: &Tensor<T>, model: &Detector<T>, dcfg: &DetectConfig) -> Result<Vec<Detection>> {
    if image.shape().n != 1 {
        return Err(Error::InvalidShape(format!(
            "detect_forward takes one image, got a batch of {}",
            image.shape().n
        )));
    }
    Ok(model.detect(image, dcfg)?.remove(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelCost {
    pub params: u64,
    pub mult_adds: u64,
}

/// Closed-form parameter and multiply-add counts of one forward pass.
pub fn model_cost(cfg: &ModelConfig) -> Result<ModelCost> {
    cfg.validate()?;
    let mut cost = ModelCost::default();
    let sizes = cfg.stage_sizes();
    for (k, spec) in cfg.stage_specs().iter().enumerate() {
        let in_side = match k {
            0 => cfg.input_size,
            _ if POOL_BEFORE[k] => sizes[k - 1] / 2,
            _ => sizes[k - 1],
        };
        cost.params += spec.param_count();
        cost.mult_adds += spec.mult_adds(in_side, in_side)?;
    }
    if cfg.fused() {
        let shapes: Vec<Shape> = cfg
            .fusion
            .layers
            .taps()
            .iter()
            .map(|&t| {
                let (h, w) = cfg.tap_size(t);
                Shape::new(1, cfg.tap_channels(t), h, w)
            })
            .collect();
        let f = fusion_cost(&cfg.fusion, &shapes)?;
        cost.params += f.params();
        cost.mult_adds += f.mult_adds();
    }
    for k in 0..cfg.pred_taps.len() {
        let shapes = cfg.pred_taps[k].aspect_ratios.len() + 1;
        let spec = Conv2dSpec::new(cfg.head_input_channels(k), shapes * (4 + cfg.num_classes()), 3).pad(1);
        let (h, w) = cfg.tap_size(cfg.pred_taps[k].tap);
        cost.params += spec.param_count();
        cost.mult_adds += spec.mult_adds(h, w)?;
    }
    Ok(cost)
}
