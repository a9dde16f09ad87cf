//! Double-precision gradient verification against central differences.
//!
//! Every differentiable component implements [`Differentiable`]; the check
//! contracts the output with a random upstream tensor `g`, so the scalar under
//! test is `dot(f(x), g)` and the analytic gradient is the backward pass fed
//! with `g`.

use rand::Rng;

use crate::init::seeded_rng;
use crate::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, Conv2d, ConvCache, Deconv2d, DeconvCache,
    L2Norm, NormCache, PoolCache,
};
use crate::tensor::{finite_diff_grad, max_rel_err, Param, Scalar, Shape, Tensor};

pub const GRAD_EPS: f64 = 1e-5;
/// Max relative error `|a - b| / max(1, |a|, |b|)` tolerated by the checks.
pub const GRAD_TOL: f64 = 1e-6;

pub trait Differentiable: Clone {
    type Cache;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache);

    /// Accumulates parameter gradients and returns one gradient per input.
    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>>;

    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub input_err: f64,
    pub param_err: f64,
    /// Name of the input or parameter with the largest error.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn max_err(&self) -> f64 {
        self.input_err.max(self.param_err)
    }

    fn record(&mut self, what: String, err: f64, is_param: bool) {
        if err > self.max_err() {
            self.worst = what;
        }
        if is_param {
            self.param_err = self.param_err.max(err);
        } else {
            self.input_err = self.input_err.max(err);
        }
        self.checked += 1;
    }
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(17));
    let data = (0..shape.numel()).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

pub fn check_gradients<L: Differentiable>(layer: &L, inputs: &[Tensor<f64>], seed: u64) -> GradReport {
    let (out, _) = layer.forward(inputs);
    let g = random_tensor::<f64>(out.shape(), seed ^ 0xa5a5);

    let mut analytic = layer.clone();
    analytic.params_mut().into_iter().for_each(|p| p.zero_grad());
    let (_, cache) = analytic.forward(inputs);
    let dxs = analytic.backward(&cache, &g);
    assert_eq!(dxs.len(), inputs.len(), "backward must return one gradient per input");

    let mut report = GradReport::default();
    for (k, x) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |xk| {
                let mut ins = inputs.to_vec();
                ins[k] = xk.clone();
                layer.forward(&ins).0.dot(&g)
            },
            x,
            GRAD_EPS,
        );
        report.record(format!("input[{k}]"), max_rel_err(&fd, &dxs[k]), false);
    }

    let n_params = analytic.params_mut().len();
    for pi in 0..n_params {
        let (name, value, grad, trainable) = {
            let mut a = analytic.params_mut();
            let p = &mut a[pi];
            (p.name.clone(), p.value.clone(), p.grad.clone(), p.trainable)
        };
        if !trainable {
            continue;
        }
        let fd = finite_diff_grad(
            |v| {
                let mut l = layer.clone();
                l.params_mut()[pi].value = v.clone();
                l.forward(inputs).0.dot(&g)
            },
            &value,
            GRAD_EPS,
        );
        report.record(name, max_rel_err(&fd, &grad), true);
    }
    report
}

/// Direct bilinear 2× upsampling, half-pixel centres (align-corners false),
/// samples outside the input read as zero.
pub fn bilinear_upsample2x_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let taps = |o: usize, len: usize| -> [(Option<usize>, f64); 2] {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let lo = src.floor();
        let frac = src - lo;
        let idx = |v: f64| (v >= 0.0 && (v as usize) < len).then_some(v as usize);
        [(idx(lo), 1.0 - frac), (idx(lo + 1.0), frac)]
    };
    Tensor::from_fn(out_shape, |i, c, y, xx| {
        let mut acc = 0.0;
        for (ry, wy) in taps(y, s.h) {
            for (rx, wx) in taps(xx, s.w) {
                if let (Some(ry), Some(rx)) = (ry, rx) {
                    acc += wy * wx * x.get(i, c, ry, rx);
                }
            }
        }
        acc
    })
}

impl Differentiable for Conv2d<f64> {
    type Cache = ConvCache<f64>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        Conv2d::forward(self, &inputs[0]).expect("conv forward")
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![Conv2d::backward(self, cache, dy, true).expect("dx requested")]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Conv2d::params_mut(self)
    }
}

impl Differentiable for Deconv2d<f64> {
    type Cache = DeconvCache<f64>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        Deconv2d::forward(self, &inputs[0]).expect("deconv forward")
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![Deconv2d::backward(self, cache, dy, true).expect("dx requested")]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Deconv2d::params_mut(self)
    }
}

impl Differentiable for L2Norm<f64> {
    type Cache = NormCache<f64>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        L2Norm::forward(self, &inputs[0]).expect("l2norm forward")
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![L2Norm::backward(self, cache, dy)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        L2Norm::params_mut(self)
    }
}

/// Parameter-free ReLU as a checkable layer.
#[derive(Clone, Copy, Debug)]
pub struct Relu;

impl Differentiable for Relu {
    type Cache = Tensor<f64>;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        let y = relu_forward(&inputs[0]);
        (y.clone(), y)
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![relu_backward(cache, dy)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}

/// Parameter-free 2×2 max pool as a checkable layer.
#[derive(Clone, Copy, Debug)]
pub struct MaxPool2;

impl Differentiable for MaxPool2 {
    type Cache = PoolCache;

    fn forward(&self, inputs: &[Tensor<f64>]) -> (Tensor<f64>, Self::Cache) {
        maxpool2_forward(&inputs[0]).expect("maxpool forward")
    }

    fn backward(&mut self, cache: &Self::Cache, dy: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![maxpool2_backward(cache, dy)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}
