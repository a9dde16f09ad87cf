//! Per-location L2 normalisation with a learnable per-channel scale.

use crate::error::{Error, Result};
use crate::tensor::{Param, Scalar, Shape, Tensor};

pub const DEFAULT_L2_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L2NormSpec {
    pub channels: usize,
    /// Initial value of every entry of the scale vector.
    pub scale: f64,
    pub epsilon: f64,
}

impl L2NormSpec {
    pub fn new(channels: usize, scale: f64) -> Self {
        L2NormSpec {
            channels,
            scale,
            epsilon: DEFAULT_L2_EPS,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.channels as u64
    }

    /// One multiply per channel per location.
    pub fn mult_adds(&self, h: usize, w: usize) -> u64 {
        (self.channels * h * w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct NormCache<T: Scalar> {
    input: Tensor<T>,
    /// `1 / sqrt(sum x^2 + eps)` per `(n, y, x)`.
    inv_norm: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct L2Norm<T: Scalar = f32> {
    pub spec: L2NormSpec,
    pub scale: Param<T>,
}

impl<T: Scalar> L2Norm<T> {
    pub fn new(name: &str, spec: L2NormSpec) -> Result<Self> {
        if spec.channels == 0 || spec.epsilon <= 0.0 {
            return Err(Error::Config(format!("illegal l2norm spec {spec:?}")));
        }
        let scale = Param::new(
            format!("{name}.scale"),
            Tensor::full(Shape::new(1, spec.channels, 1, 1), T::lit(spec.scale)),
        );
        Ok(L2Norm { spec, scale })
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let s = x.shape();
        if s.c != self.spec.channels {
            return Err(Error::ChannelMismatch {
                op: "l2norm",
                expected: self.spec.channels,
                actual: s.c,
            });
        }
        let plane = s.plane();
        let eps = T::lit(self.spec.epsilon);
        let scale = self.scale.value.data();
        let mut out = Tensor::zeros(s);
        let mut inv_norm = vec![T::zero(); s.n * plane];
        for i in 0..s.n {
            let xi = x.item(i);
            let inv = &mut inv_norm[i * plane..(i + 1) * plane];
            for ch in 0..s.c {
                for (acc, &v) in inv.iter_mut().zip(&xi[ch * plane..(ch + 1) * plane]) {
                    *acc += v * v;
                }
            }
            inv.iter_mut().for_each(|v| *v = T::one() / (*v + eps).sqrt());
            let oi = out.item_mut(i);
            for ch in 0..s.c {
                let sc = scale[ch];
                let src = &xi[ch * plane..(ch + 1) * plane];
                for ((o, &v), &r) in oi[ch * plane..(ch + 1) * plane].iter_mut().zip(src).zip(inv.iter()) {
                    *o = sc * v * r;
                }
            }
        }
        Ok((out, inv_norm))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
        let (out, inv_norm) = self.run(x)?;
        Ok((
            out,
            NormCache {
                input: x.clone(),
                inv_norm,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let s = cache.input.shape();
        assert_eq!(dy.shape(), s, "l2norm backward: bad upstream shape");
        let plane = s.plane();
        let mut dx = Tensor::zeros(s);
        let scale = self.scale.value.data().to_vec();
        let mut proj = vec![T::zero(); plane];
        for i in 0..s.n {
            let xi = cache.input.item(i);
            let gi = dy.item(i);
            let inv = &cache.inv_norm[i * plane..(i + 1) * plane];
            proj.fill(T::zero());
            for ch in 0..s.c {
                let sc = scale[ch];
                let xs = &xi[ch * plane..(ch + 1) * plane];
                let gs = &gi[ch * plane..(ch + 1) * plane];
                let mut ds = T::zero();
                for k in 0..plane {
                    ds += gs[k] * xs[k] * inv[k];
                    proj[k] += sc * gs[k] * xs[k];
                }
                if self.scale.trainable {
                    self.scale.grad.data_mut()[ch] += ds;
                }
            }
            let di = dx.item_mut(i);
            for ch in 0..s.c {
                let sc = scale[ch];
                let xs = &xi[ch * plane..(ch + 1) * plane];
                let gs = &gi[ch * plane..(ch + 1) * plane];
                for (k, d) in di[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                    let r = inv[k];
                    *d = r * sc * gs[k] - xs[k] * r * r * r * proj[k];
                }
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale]
    }
}

pub fn l2norm_scale_forward<T: Scalar>(x: &Tensor<T>, spec: L2NormSpec) -> Result<Tensor<T>> {
    L2Norm::new("l2norm", spec)?.infer(x)
}

/// Euclidean norm of the channel vector at every `(n, y, x)`.
pub fn channel_norms<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::with_capacity(s.n * s.plane());
    for i in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let sq: f64 = (0..s.c).map(|c| x.get(i, c, y, xx).as_f64().powi(2)).sum();
                out.push(sq.sqrt());
            }
        }
    }
    out
}
