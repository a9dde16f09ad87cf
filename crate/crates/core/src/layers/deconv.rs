//! Transposed convolution and the bilinear-upsampling initialiser.

use rand::Rng;

use super::conv::Window;
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::init::xavier_with;
use crate::tensor::{Param, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deconv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub trainable: bool,
}

impl Deconv2dSpec {
    /// The 2× upsampler used between adjacent taps: kernel 4, stride 2, pad 1.
    pub fn upsample2x(channels: usize) -> Self {
        Deconv2dSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (4, 4),
            stride: (2, 2),
            pad: (1, 1),
            trainable: true,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels, self.kernel.0, self.kernel.1)
    }

    pub(crate) fn window(&self) -> Window {
        Window {
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.pad.0,
            pw: self.pad.1,
            dh: 1,
            dw: 1,
        }
    }

    /// `(h - 1)·s - 2p + k`, per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            let v = (n as i64 - 1) * s as i64 - 2 * p as i64 + k as i64;
            (v >= 1 && s >= 1).then_some(v as usize)
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.pad.0),
            dim(w, self.kernel.1, self.stride.1, self.pad.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::EmptyOutput { op: "deconv2d", h, w }),
        }
    }

    pub fn mult_adds(&self, h: usize, w: usize) -> u64 {
        (h * w * self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1) as u64
    }

    pub fn param_count(&self) -> u64 {
        self.weight_shape().numel() as u64
    }
}

/// Channel-diagonal separable tent filter of shape `(channels, channels, k, k)`.
///
/// `w[y][x] = (1 - |y/f - c|)·(1 - |x/f - c|)` with `f = ceil(k/2)` and
/// `c = (2f - 1 - f mod 2) / (2f)`.
pub fn bilinear_init<T: Scalar>(kernel: (usize, usize), stride: (usize, usize), channels: usize) -> Result<Tensor<T>> {
    let (kh, kw) = kernel;
    if kh != kw || kh == 0 {
        return Err(Error::Config(format!("bilinear init needs a square kernel, got {kh}x{kw}")));
    }
    if stride.0 != stride.1 || stride.0 == 0 {
        return Err(Error::Config(format!("bilinear init needs equal strides, got {stride:?}")));
    }
    let tent = bilinear_tent(kh);
    let mut w = Tensor::zeros(Shape::new(channels, channels, kh, kw));
    for ch in 0..channels {
        for y in 0..kh {
            for x in 0..kw {
                w.set(ch, ch, y, x, T::lit(tent[y] * tent[x]));
            }
        }
    }
    Ok(w)
}

/// One axis of the bilinear kernel.
pub fn bilinear_tent(k: usize) -> Vec<f64> {
    let f = k.div_ceil(2) as f64;
    let c = (2.0 * f - 1.0 - (f % 2.0)) / (2.0 * f);
    (0..k).map(|i| 1.0 - (i as f64 / f - c).abs()).collect()
}

#[derive(Clone, Debug)]
pub struct DeconvCache<T: Scalar> {
    input: Tensor<T>,
    out_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Deconv2d<T: Scalar = f32> {
    pub spec: Deconv2dSpec,
    /// `(in_channels, out_channels, kh, kw)`.
    pub weight: Param<T>,
}

impl<T: Scalar> Deconv2d<T> {
    pub fn bilinear(name: &str, spec: Deconv2dSpec) -> Result<Self> {
        if spec.in_channels != spec.out_channels {
            return Err(Error::ChannelMismatch {
                op: "bilinear deconv",
                expected: spec.in_channels,
                actual: spec.out_channels,
            });
        }
        let mut weight = Param::new(
            format!("{name}.weight"),
            bilinear_init(spec.kernel, spec.stride, spec.in_channels)?,
        );
        weight.trainable = spec.trainable;
        Ok(Deconv2d { spec, weight })
    }

    pub fn xavier<R: Rng>(name: &str, spec: Deconv2dSpec, rng: &mut R) -> Self {
        let mut weight = Param::new(format!("{name}.weight"), xavier_with(spec.weight_shape(), rng));
        weight.trainable = spec.trainable;
        Deconv2d { spec, weight }
    }

    pub fn from_param(spec: Deconv2dSpec, weight: Param<T>) -> Result<Self> {
        if weight.value.shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "deconv2d weight",
                left: spec.weight_shape(),
                right: weight.value.shape(),
            });
        }
        Ok(Deconv2d { spec, weight })
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "deconv2d",
                expected: self.spec.in_channels,
                actual: s.c,
            });
        }
        let (oh, ow) = self.spec.output_hw(s.h, s.w)?;
        let win = self.spec.window();
        let oc = self.spec.out_channels;
        let rows = oc * win.kh * win.kw;
        let hw = s.h * s.w;
        let mut out = Tensor::zeros(Shape::new(s.n, oc, oh, ow));
        let mut cols = vec![T::zero(); rows * hw];
        for i in 0..s.n {
            gemm(rows, s.c, hw, self.weight.value.data(), true, x.item(i), false, &mut cols, false);
            win.col2im(&cols, oc, oh, ow, s.h, s.w, out.item_mut(i));
        }
        Ok((out, (oh, ow)))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DeconvCache<T>)> {
        let (out, out_hw) = self.run(x)?;
        Ok((
            out,
            DeconvCache {
                input: x.clone(),
                out_hw,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn backward(&mut self, cache: &DeconvCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let s = cache.input.shape();
        let (oh, ow) = cache.out_hw;
        let win = self.spec.window();
        let oc = self.spec.out_channels;
        assert_eq!(dy.shape(), Shape::new(s.n, oc, oh, ow), "deconv2d backward: bad upstream shape");
        let rows = oc * win.kh * win.kw;
        let hw = s.h * s.w;
        let mut dx = need_dx.then(|| Tensor::zeros(s));
        let mut dcols = vec![T::zero(); rows * hw];
        for i in 0..s.n {
            win.im2col(dy.item(i), oc, oh, ow, s.h, s.w, &mut dcols);
            if self.weight.trainable {
                gemm(s.c, hw, rows, cache.input.item(i), false, &dcols, true, self.weight.grad.data_mut(), true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(s.c, rows, hw, self.weight.value.data(), false, &dcols, false, dx.item_mut(i), false);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

pub fn deconv2d_forward<T: Scalar>(x: &Tensor<T>, spec: Deconv2dSpec, weights: &Param<T>) -> Result<Tensor<T>> {
    Deconv2d::from_param(spec, weights.clone())?.infer(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{bilinear_upsample2x_oracle, check_gradients, random_tensor, GRAD_TOL};
    use crate::init::seeded_rng;
    use crate::layers::conv::{Conv2d, Conv2dSpec};
    use rand::Rng;

    #[test]
    fn tent_values() {
        assert_eq!(bilinear_tent(4), vec![0.25, 0.75, 0.75, 0.25]);
        // f = 1, c = 0: the degenerate two-tap case collapses onto one tap.
        assert_eq!(bilinear_tent(2), vec![1.0, 0.0]);
        assert_eq!(bilinear_tent(1), vec![1.0]);
        let t3 = bilinear_tent(3);
        assert_eq!(t3, vec![0.25, 0.75, 0.75]);
    }

    #[test]
    fn kernel_two_is_transpose_symmetric_and_diagonal() {
        let w: Tensor<f64> = bilinear_init((2, 2), (1, 1), 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_eq!(w.get(a, b, y, x), w.get(a, b, x, y));
                        if a != b {
                            assert_eq!(w.get(a, b, y, x), 0.0);
                        }
                    }
                }
            }
        }
        assert!(bilinear_init::<f64>((2, 3), (1, 1), 1).is_err());
    }

    #[test]
    fn stride_two_phases_partition_unity() {
        let t = bilinear_tent(4);
        // Taps reaching any output position from a stride-2 input grid.
        for phase in 0..2 {
            let s: f64 = (phase..4).step_by(2).map(|i| t[i]).sum();
            assert_eq!(s, 1.0);
        }
        let w: Tensor<f64> = bilinear_init((4, 4), (2, 2), 2).unwrap();
        assert!((0..4).all(|y| (0..4).all(|x| w.get(0, 1, y, x) == 0.0 && w.get(1, 0, y, x) == 0.0)));
    }

    #[test]
    fn upsamples_two_by_two_bilinearly() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = Deconv2d::<f64>::bilinear("up", Deconv2dSpec::upsample2x(1)).unwrap();
        let out = d.infer(&x).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 4, 4));
        let want = bilinear_upsample2x_oracle(&x);
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_interior_is_preserved() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 5, 5), 3.5);
        let out = Deconv2d::<f64>::bilinear("up", Deconv2dSpec::upsample2x(2))
            .unwrap()
            .infer(&x)
            .unwrap();
        for ch in 0..2 {
            for y in 1..9 {
                for x in 1..9 {
                    assert!((out.get(0, ch, y, x) - 3.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_pixel_expands_to_kernel_centre() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 2.0);
        let out = Deconv2d::<f64>::bilinear("up", Deconv2dSpec::upsample2x(1))
            .unwrap()
            .infer(&x)
            .unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2));
        let k: Tensor<f64> = bilinear_init((4, 4), (2, 2), 1).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                assert_eq!(out.get(0, 0, y, xx), 2.0 * k.get(0, 0, y + 1, xx + 1));
            }
        }
    }

    #[test]
    fn adjoint_of_convolution() {
        let mut rng = seeded_rng(3);
        for case in 0..20u64 {
            let spec = Deconv2dSpec {
                in_channels: rng.gen_range(1..4),
                out_channels: rng.gen_range(1..4),
                kernel: (rng.gen_range(1..5), rng.gen_range(1..5)),
                stride: (rng.gen_range(1..3), rng.gen_range(1..3)),
                pad: (rng.gen_range(0..2), rng.gen_range(0..2)),
                trainable: true,
            };
            let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
            let Ok((oh, ow)) = spec.output_hw(h, w) else { continue };
            let d = Deconv2d::<f64>::xavier("d", spec, &mut rng);
            let x = random_tensor::<f64>(Shape::new(1, spec.in_channels, h, w), case);
            let g = random_tensor::<f64>(Shape::new(1, spec.out_channels, oh, ow), case + 100);
            let conv_spec = Conv2dSpec {
                in_channels: spec.out_channels,
                out_channels: spec.in_channels,
                kernel: spec.kernel,
                stride: spec.stride,
                pad: spec.pad,
                dilation: (1, 1),
                has_bias: false,
            };
            let conv = Conv2d::from_params(conv_spec, d.weight.clone(), None).unwrap();
            let lhs = d.infer(&x).unwrap().dot(&g);
            let rhs = x.dot(&conv.infer(&g).unwrap());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(9);
        for case in 0..6u64 {
            let spec = Deconv2dSpec {
                in_channels: rng.gen_range(1..3),
                out_channels: rng.gen_range(1..3),
                kernel: (rng.gen_range(2..5), rng.gen_range(2..5)),
                stride: (rng.gen_range(1..3), rng.gen_range(1..3)),
                pad: (rng.gen_range(0..2), rng.gen_range(0..2)),
                trainable: true,
            };
            let x = random_tensor::<f64>(Shape::new(rng.gen_range(1..3), spec.in_channels, 3, 2), case);
            let d = Deconv2d::<f64>::xavier("d", spec, &mut rng);
            let report = check_gradients(&d, &[x], case);
            assert!(report.max_err() < GRAD_TOL, "{spec:?}: {report:?}");
        }
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let mut spec = Deconv2dSpec::upsample2x(2);
        spec.trainable = false;
        let mut d = Deconv2d::<f64>::bilinear("d", spec).unwrap();
        let x = random_tensor::<f64>(Shape::new(1, 2, 3, 3), 1);
        let (y, cache) = d.forward(&x).unwrap();
        d.backward(&cache, &y, true);
        assert!(d.weight.grad.data().iter().all(|&g| g == 0.0));
    }
}
