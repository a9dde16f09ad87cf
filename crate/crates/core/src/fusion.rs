//! Multi-level feature fusion: inject deeper, more semantic context into the
//! shallow high-resolution prediction map.
//!
//! Every source tap gets its own branch:
//!
//! ```text
//! deeper tap  -> deconv 2x (bilinear init) -> conv3x3 -> ReLU -> L2Norm(20)
//! target tap  ->                              conv3x3 -> ReLU -> L2Norm(10)
//! shallower   -> maxpool 2x2               -> conv3x3 -> ReLU -> L2Norm(10)
//! ```
//!
//! The branches are then combined either by channel concatenation followed by
//! a 1×1 reduction ([`FusionMode::Concat`]) or by a unit-weight point-to-point
//! sum ([`FusionMode::Eltsum`]). A final ReLU follows the combiner.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::detector::Tap;
use crate::error::{Error, Result};
use crate::gradcheck::Differentiable;
use crate::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_inplace, Conv2d, Conv2dSpec, ConvCache, Deconv2d,
    Deconv2dSpec, DeconvCache, L2Norm, L2NormSpec, NormCache, PoolCache,
};
use crate::tensor::{concat_many, split_channels, Param, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Plain detector; the target tap feeds its head directly.
    None,
    Concat,
    Eltsum,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Concat => "concat",
            FusionMode::Eltsum => "eltsum",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "concat" => Ok(FusionMode::Concat),
            "eltsum" => Ok(FusionMode::Eltsum),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// Which backbone taps are fused into the conv4-level map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionLayers {
    Conv4Conv5,
    Conv4Fc6,
    Conv3Conv4Conv5,
}

impl FusionLayers {
    /// Branch sources in combination order.
    pub fn taps(&self) -> &'static [Tap] {
        match self {
            FusionLayers::Conv4Conv5 => &[Tap::Conv4a, Tap::Conv5a],
            FusionLayers::Conv4Fc6 => &[Tap::Conv4a, Tap::Fc6a],
            FusionLayers::Conv3Conv4Conv5 => &[Tap::Conv3a, Tap::Conv4a, Tap::Conv5a],
        }
    }
}

impl fmt::Display for FusionLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionLayers::Conv4Conv5 => "conv4a+conv5a",
            FusionLayers::Conv4Fc6 => "conv4a+fc6a",
            FusionLayers::Conv3Conv4Conv5 => "conv3a+conv4a+conv5a",
        })
    }
}

impl FromStr for FusionLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4a+conv5a" => Ok(FusionLayers::Conv4Conv5),
            "conv4a+fc6a" => Ok(FusionLayers::Conv4Fc6),
            "conv3a+conv4a+conv5a" => Ok(FusionLayers::Conv3Conv4Conv5),
            _ => Err(Error::Config(format!("unknown fusion layer set `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub layers: FusionLayers,
    /// Output channels of every 3×3 branch convolution.
    pub branch_kernels: usize,
    /// Output channels of the 1×1 reduction (concat only); defaults to
    /// `branch_kernels`.
    pub reduce_kernels: Option<usize>,
    pub norm_scale_shallow: f64,
    pub norm_scale_deep: f64,
    /// Scale for the conv3-level branch of the three-way variant.
    pub norm_scale_third: f64,
    pub deconv_trainable: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::None,
            layers: FusionLayers::Conv4Conv5,
            branch_kernels: 512,
            reduce_kernels: None,
            norm_scale_shallow: 10.0,
            norm_scale_deep: 20.0,
            norm_scale_third: 10.0,
            deconv_trainable: true,
        }
    }
}

impl FusionConfig {
    pub fn concat(branch_kernels: usize) -> Self {
        FusionConfig {
            mode: FusionMode::Concat,
            branch_kernels,
            ..Default::default()
        }
    }

    pub fn eltsum(branch_kernels: usize) -> Self {
        FusionConfig {
            mode: FusionMode::Eltsum,
            branch_kernels,
            ..Default::default()
        }
    }

    pub fn reduce_channels(&self) -> usize {
        self.reduce_kernels.unwrap_or(self.branch_kernels)
    }

    /// Channels of the fused map.
    pub fn output_channels(&self) -> usize {
        match self.mode {
            FusionMode::Concat => self.reduce_channels(),
            _ => self.branch_kernels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_kernels == 0 || self.reduce_kernels == Some(0) {
            return Err(Error::Config("fusion kernel counts must be positive".into()));
        }
        for s in [self.norm_scale_shallow, self.norm_scale_deep, self.norm_scale_third] {
            if !s.is_finite() {
                return Err(Error::Config("fusion norm scales must be finite".into()));
            }
        }
        Ok(())
    }

    fn norm_scale_for(&self, role: Resample) -> f64 {
        match role {
            Resample::Identity => self.norm_scale_shallow,
            Resample::Upsample => self.norm_scale_deep,
            Resample::Downsample => self.norm_scale_third,
        }
    }
}

/// How a branch input is brought to the target resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Identity,
    Upsample,
    Downsample,
}

fn resample_for(tap: Tap) -> Resample {
    match tap {
        Tap::Conv3a => Resample::Downsample,
        Tap::Conv4a => Resample::Identity,
        _ => Resample::Upsample,
    }
}

#[derive(Clone, Debug)]
pub struct Branch<T: Scalar> {
    pub source: Tap,
    pub deconv: Option<Deconv2d<T>>,
    pub conv: Conv2d<T>,
    pub norm: L2Norm<T>,
    resample: Resample,
}

#[derive(Clone, Debug)]
struct BranchCache<T: Scalar> {
    deconv: Option<DeconvCache<T>>,
    pool: Option<PoolCache>,
    conv: ConvCache<T>,
    relu_out: Tensor<T>,
    norm: NormCache<T>,
}

#[derive(Clone, Debug)]
pub struct FusionCache<T: Scalar> {
    branches: Vec<BranchCache<T>>,
    /// Post-norm branch tensors, i.e. what enters the combiner.
    normalized: Vec<Tensor<T>>,
    reduce: Option<ConvCache<T>>,
    output: Tensor<T>,
}

impl<T: Scalar> FusionCache<T> {
    pub fn normalized(&self) -> &[Tensor<T>] {
        &self.normalized
    }

    /// Branch activations after ReLU, before normalisation.
    pub fn activations(&self) -> Vec<&Tensor<T>> {
        self.branches.iter().map(|b| &b.relu_out).collect()
    }
}

/// Parameters and topology of one fusion module.
#[derive(Clone, Debug)]
pub struct FusionModule<T: Scalar = f32> {
    pub cfg: FusionConfig,
    pub branches: Vec<Branch<T>>,
    pub reduce: Option<Conv2d<T>>,
}

impl<T: Scalar> FusionModule<T> {
    /// `source_channels[k]` is the channel count of `cfg.layers.taps()[k]`.
    pub fn new<R: Rng>(cfg: FusionConfig, source_channels: &[usize], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == FusionMode::None {
            return Err(Error::Config("fusion module requested with mode none".into()));
        }
        let taps = cfg.layers.taps();
        if taps.len() != source_channels.len() {
            return Err(Error::Config(format!(
                "fusion {} needs {} sources, got {}",
                cfg.layers,
                taps.len(),
                source_channels.len()
            )));
        }
        let mut branches = Vec::with_capacity(taps.len());
        for (&tap, &ch) in taps.iter().zip(source_channels) {
            let prefix = format!("fusion.{tap}");
            let resample = resample_for(tap);
            let deconv = match resample {
                Resample::Upsample => {
                    let mut spec = Deconv2dSpec::upsample2x(ch);
                    spec.trainable = cfg.deconv_trainable;
                    Some(Deconv2d::bilinear(&format!("{prefix}.deconv"), spec)?)
                }
                _ => None,
            };
            let conv = Conv2d::new(
                &format!("{prefix}.conv"),
                Conv2dSpec::new(ch, cfg.branch_kernels, 3).pad(1),
                rng,
            );
            let norm = L2Norm::new(
                &format!("{prefix}.norm"),
                L2NormSpec::new(cfg.branch_kernels, cfg.norm_scale_for(resample)),
            )?;
            branches.push(Branch {
                source: tap,
                deconv,
                conv,
                norm,
                resample,
            });
        }
        let reduce = (cfg.mode == FusionMode::Concat).then(|| {
            Conv2d::new(
                "fusion.reduce",
                Conv2dSpec::new(cfg.branch_kernels * taps.len(), cfg.reduce_channels(), 1),
                rng,
            )
        });
        Ok(FusionModule { cfg, branches, reduce })
    }

    /// Target resolution is that of the identity (conv4-level) branch.
    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<(usize, usize)> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Config(format!(
                "fusion expects {} inputs, got {}",
                self.branches.len(),
                inputs.len()
            )));
        }
        let target = self
            .branches
            .iter()
            .position(|b| b.resample == Resample::Identity)
            .expect("every layer set includes the target tap");
        let ts = inputs[target].shape();
        for (b, x) in self.branches.iter().zip(inputs) {
            let s = x.shape();
            let ok = s.n == ts.n
                && match b.resample {
                    Resample::Identity => true,
                    Resample::Upsample => 2 * s.h == ts.h && 2 * s.w == ts.w,
                    Resample::Downsample => s.h == 2 * ts.h && s.w == 2 * ts.w,
                };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "fusion spatial ratio",
                    left: ts,
                    right: s,
                });
            }
        }
        Ok((ts.h, ts.w))
    }

    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, FusionCache<T>)> {
        self.check_inputs(inputs)?;
        let mut caches = Vec::with_capacity(self.branches.len());
        let mut normalized = Vec::with_capacity(self.branches.len());
        for (b, &x) in self.branches.iter().zip(inputs) {
            let (resampled, deconv, pool) = match (&b.deconv, b.resample) {
                (Some(d), _) => {
                    let (y, c) = d.forward(x)?;
                    (y, Some(c), None)
                }
                (None, Resample::Downsample) => {
                    let (y, c) = maxpool2_forward(x)?;
                    (y, None, Some(c))
                }
                (None, _) => (x.clone(), None, None),
            };
            let (mut act, conv) = b.conv.forward(&resampled)?;
            relu_inplace(&mut act);
            let (normed, norm) = b.norm.forward(&act)?;
            normalized.push(normed);
            caches.push(BranchCache {
                deconv,
                pool,
                conv,
                relu_out: act,
                norm,
            });
        }
        let (output, reduce) = self.combine_inner(&normalized)?;
        Ok((
            output.clone(),
            FusionCache {
                branches: caches,
                normalized,
                reduce,
                output,
            },
        ))
    }

    pub fn infer(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(self.forward(inputs)?.0)
    }

    fn combine_inner(&self, normalized: &[Tensor<T>]) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        match self.cfg.mode {
            FusionMode::Concat => {
                let refs: Vec<&Tensor<T>> = normalized.iter().collect();
                let cat = concat_many(&refs)?;
                let reduce = self.reduce.as_ref().expect("concat mode has a reduction");
                let (mut out, cache) = reduce.forward(&cat)?;
                relu_inplace(&mut out);
                Ok((out, Some(cache)))
            }
            FusionMode::Eltsum => {
                let mut out = normalized[0].clone();
                for t in &normalized[1..] {
                    if t.shape() != out.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "eltsum fusion",
                            left: out.shape(),
                            right: t.shape(),
                        });
                    }
                    out.add_assign(t);
                }
                relu_inplace(&mut out);
                Ok((out, None))
            }
            FusionMode::None => Err(Error::Config("fusion mode none has no combiner".into())),
        }
    }

    /// Apply only the combiner (and final ReLU) to already-normalised branch
    /// tensors.
    pub fn combine(&self, normalized: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(self.combine_inner(normalized)?.0)
    }

    /// Returns one gradient per input, in branch order.
    pub fn backward(&mut self, cache: &FusionCache<T>, dy: &Tensor<T>) -> Vec<Tensor<T>> {
        let dz = relu_backward(&cache.output, dy);
        let dnorm: Vec<Tensor<T>> = match self.cfg.mode {
            FusionMode::Concat => {
                let reduce = self.reduce.as_mut().expect("concat mode has a reduction");
                let dcat = reduce
                    .backward(cache.reduce.as_ref().expect("reduce cache"), &dz, true)
                    .expect("dx requested");
                let channels: Vec<usize> = cache.normalized.iter().map(|t| t.shape().c).collect();
                split_channels(&dcat, &channels).expect("channels match")
            }
            _ => vec![dz; self.branches.len()],
        };
        self.branches
            .iter_mut()
            .zip(&cache.branches)
            .zip(dnorm)
            .map(|((b, c), g)| {
                let g = b.norm.backward(&c.norm, &g);
                let g = relu_backward(&c.relu_out, &g);
                let g = b.conv.backward(&c.conv, &g, true).expect("dx requested");
                match (&mut b.deconv, &c.deconv, &c.pool) {
                    (Some(d), Some(dc), _) => d.backward(dc, &g, true).expect("dx requested"),
                    (_, _, Some(pc)) => maxpool2_backward(pc, &g),
                    _ => g,
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> FusionModule<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            spec: c.spec,
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
        };
        FusionModule {
            cfg: self.cfg,
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    source: b.source,
                    deconv: b.deconv.as_ref().map(|d| Deconv2d {
                        spec: d.spec,
                        weight: d.weight.cast(),
                    }),
                    conv: conv(&b.conv),
                    norm: L2Norm {
                        spec: b.norm.spec,
                        scale: b.norm.scale.cast(),
                    },
                    resample: b.resample,
                })
                .collect(),
            reduce: self.reduce.as_ref().map(conv),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.branches {
            if let Some(d) = &b.deconv {
                out.extend(d.params());
            }
            out.extend(b.conv.params());
            out.extend(b.norm.params());
        }
        if let Some(r) = &self.reduce {
            out.extend(r.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            if let Some(d) = &mut b.deconv {
                out.extend(d.params_mut());
            }
            out.extend(b.conv.params_mut());
            out.extend(b.norm.params_mut());
        }
        if let Some(r) = &mut self.reduce {
            out.extend(r.params_mut());
        }
        out
    }
}

/// Two-input concatenation fusion: `f_shallow` at the target resolution,
/// `f_deep` at half of it.
pub fn concat_fusion_forward<T: Scalar>(
    f_shallow: &Tensor<T>,
    f_deep: &Tensor<T>,
    module: &FusionModule<T>,
) -> Result<Tensor<T>> {
    if module.cfg.mode != FusionMode::Concat {
        return Err(Error::Config(format!(
            "concat fusion called on a {} module",
            module.cfg.mode
        )));
    }
    module.infer(&[f_shallow, f_deep])
}

/// Two-input element-sum fusion.
pub fn eltsum_fusion_forward<T: Scalar>(
    f_shallow: &Tensor<T>,
    f_deep: &Tensor<T>,
    module: &FusionModule<T>,
) -> Result<Tensor<T>> {
    if module.cfg.mode != FusionMode::Eltsum {
        return Err(Error::Config(format!(
            "eltsum fusion called on a {} module",
            module.cfg.mode
        )));
    }
    module.infer(&[f_shallow, f_deep])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub mult_adds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FusionCost {
    pub layers: Vec<LayerCost>,
}

impl FusionCost {
    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn mult_adds(&self) -> u64 {
        self.layers.iter().map(|l| l.mult_adds).sum()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }
}

/// Closed-form parameter and multiply-add counts, one entry per layer.
/// `input_shapes` follow `cfg.layers.taps()` order.
pub fn fusion_cost(cfg: &FusionConfig, input_shapes: &[Shape]) -> Result<FusionCost> {
    let mut cost = FusionCost::default();
    if cfg.mode == FusionMode::None {
        return Ok(cost);
    }
    let taps = cfg.layers.taps();
    if taps.len() != input_shapes.len() {
        return Err(Error::Config("fusion_cost: wrong number of input shapes".into()));
    }
    let target = input_shapes[taps.iter().position(|&t| t == Tap::Conv4a).expect("target tap")];
    let (h, w) = (target.h, target.w);
    for (&tap, s) in taps.iter().zip(input_shapes) {
        if resample_for(tap) == Resample::Upsample {
            let spec = Deconv2dSpec::upsample2x(s.c);
            cost.layers.push(LayerCost {
                name: format!("fusion.{tap}.deconv"),
                kind: LayerKind::Deconv,
                params: spec.param_count(),
                mult_adds: spec.mult_adds(s.h, s.w),
            });
        }
        let conv = Conv2dSpec::new(s.c, cfg.branch_kernels, 3).pad(1);
        cost.layers.push(LayerCost {
            name: format!("fusion.{tap}.conv"),
            kind: LayerKind::Conv,
            params: conv.param_count(),
            mult_adds: conv.mult_adds(h, w)?,
        });
        let norm = L2NormSpec::new(cfg.branch_kernels, 1.0);
        cost.layers.push(LayerCost {
            name: format!("fusion.{tap}.norm"),
            kind: LayerKind::Norm,
            params: norm.param_count(),
            mult_adds: norm.mult_adds(h, w),
        });
    }
    if cfg.mode == FusionMode::Concat {
        let reduce = Conv2dSpec::new(cfg.branch_kernels * taps.len(), cfg.reduce_channels(), 1);
        cost.layers.push(LayerCost {
            name: "fusion.reduce".into(),
            kind: LayerKind::Conv,
            params: reduce.param_count(),
            mult_adds: reduce.mult_adds(h, w)?,
        });
    }
    Ok(cost)
}

impl Differentiable for FusionModule<f64> {
    type Cache = FusionCache<f64>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        FusionModule::forward(self, &refs).expect("fusion forward")
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        FusionModule::backward(self, cache, dy)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        FusionModule::params_mut(self)
    }
}
