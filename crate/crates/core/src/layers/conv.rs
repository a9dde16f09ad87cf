//! Cross-correlation via im2col + GEMM, with stride, padding and dilation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::init::xavier_with;
use crate::tensor::{Param, Scalar, Shape, Tensor};

/// Sliding-window geometry shared by convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
}

fn window_out(size: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let padded = size + 2 * p;
    (padded >= span).then(|| (padded - span) / s + 1)
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_out(h, self.kh, self.sh, self.ph, self.dh)?,
            window_out(w, self.kw, self.sw, self.pw, self.dw)?,
        ))
    }

    /// Range of output columns `ox` whose tap lands inside `0..w`, given
    /// `ix = ox * stride + offset`.
    #[inline]
    fn valid_range(offset: isize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = if (w as isize) <= offset {
            0
        } else {
            ((w as isize - offset + s - 1) / s).min(ow as isize)
        };
        let lo = lo.min(ow as isize) as usize;
        (lo, (hi.max(0) as usize).max(lo))
    }

    /// Unfold one image `(c, h, w)` into `cols` of shape `(c·kh·kw, oh·ow)`.
    #[allow(clippy::too_many_arguments)]
    pub fn im2col<T: Scalar>(&self, src: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let p = oh * ow;
        debug_assert_eq!(cols.len(), c * self.kh * self.kw * p);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let xoff = (kx * self.dw) as isize - self.pw as isize;
                    let (lo, hi) = Self::valid_range(xoff, self.sw, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.sh + ky * self.dh) as isize - self.ph as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if self.sw == 1 && hi > lo {
                            let start = (lo as isize + xoff) as usize;
                            line[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                        } else {
                            for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                                *v = srow[(ox as isize * self.sw as isize + xoff) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatter-add `cols` back into `dst`.
    #[allow(clippy::too_many_arguments)]
    pub fn col2im<T: Scalar>(&self, cols: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, dst: &mut [T]) {
        let p = oh * ow;
        for ch in 0..c {
            let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    let xoff = (kx * self.dw) as isize - self.pw as isize;
                    let (lo, hi) = Self::valid_range(xoff, self.sw, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * self.sh + ky * self.dh) as isize - self.ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let line = &src[oy * ow..(oy + 1) * ow];
                        if self.sw == 1 && hi > lo {
                            let start = (lo as isize + xoff) as usize;
                            for (d, &v) in drow[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, &v) in line.iter().enumerate().take(hi).skip(lo) {
                                drow[(ox as isize * self.sw as isize + xoff) as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Square kernel, stride 1, no padding, no dilation, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            pad: (0, 0),
            dilation: (1, 1),
            has_bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.has_bias = b;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub(crate) fn window(&self) -> Window {
        Window {
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.pad.0,
            pw: self.pad.1,
            dh: self.dilation.0,
            dw: self.dilation.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels >= 1
            && self.out_channels >= 1
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("illegal conv spec {self:?}")))
        }
    }

    /// `floor((h + 2p - d(k-1) - 1) / s) + 1`, per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        self.window()
            .output_hw(h, w)
            .ok_or(Error::EmptyOutput { op: "conv2d", h, w })
    }

    pub fn mult_adds(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((oh * ow * self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1) as u64)
    }

    pub fn param_count(&self) -> u64 {
        (self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }) as u64
    }
}

/// Saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T: Scalar> {
    input_shape: Shape,
    out_hw: (usize, usize),
    cols: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub spec: Conv2dSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Xavier-initialised weights, zero bias.
    pub fn new<R: Rng>(name: &str, spec: Conv2dSpec, rng: &mut R) -> Self {
        let weight = Param::new(format!("{name}.weight"), xavier_with(spec.weight_shape(), rng));
        let bias = spec.has_bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)),
            )
        });
        Conv2d { spec, weight, bias }
    }

    pub fn from_params(spec: Conv2dSpec, weight: Param<T>, bias: Option<Param<T>>) -> Result<Self> {
        spec.validate()?;
        if weight.value.shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                left: spec.weight_shape(),
                right: weight.value.shape(),
            });
        }
        if spec.has_bias != bias.is_some() {
            return Err(Error::Config("conv2d bias presence disagrees with spec".into()));
        }
        if let Some(b) = &bias {
            if b.value.shape().numel() != spec.out_channels {
                return Err(Error::ChannelMismatch {
                    op: "conv2d bias",
                    expected: spec.out_channels,
                    actual: b.value.shape().numel(),
                });
            }
        }
        Ok(Conv2d { spec, weight, bias })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.spec.in_channels,
                actual: s.c,
            });
        }
        self.spec.output_hw(s.h, s.w)
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (oh, ow) = self.check_input(x)?;
        let s = x.shape();
        let win = self.spec.window();
        let k = s.c * win.kh * win.kw;
        let p = oh * ow;
        let oc = self.spec.out_channels;
        let mut out = Tensor::zeros(Shape::new(s.n, oc, oh, ow));
        let mut cols = vec![T::zero(); if keep { s.n * k * p } else { k * p }];
        for i in 0..s.n {
            let buf = if keep {
                &mut cols[i * k * p..(i + 1) * k * p]
            } else {
                &mut cols[..]
            };
            win.im2col(x.item(i), s.c, s.h, s.w, oh, ow, buf);
            let dst = out.item_mut(i);
            gemm(oc, k, p, self.weight.value.data(), false, buf, false, dst, false);
            if let Some(b) = &self.bias {
                for (ch, &bv) in b.value.data().iter().enumerate() {
                    dst[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        if !keep {
            cols = Vec::new();
        }
        Ok((
            out,
            ConvCache {
                input_shape: s,
                out_hw: (oh, ow),
                cols,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        self.run(x, true)
    }

    /// Forward without retaining anything for backward.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let s = cache.input_shape;
        let (oh, ow) = cache.out_hw;
        let win = self.spec.window();
        let k = s.c * win.kh * win.kw;
        let p = oh * ow;
        let oc = self.spec.out_channels;
        assert_eq!(
            dy.shape(),
            Shape::new(s.n, oc, oh, ow),
            "conv2d backward: bad upstream shape"
        );
        assert_eq!(cache.cols.len(), s.n * k * p, "conv2d backward: cache was not retained");
        let mut dx = need_dx.then(|| Tensor::zeros(s));
        let mut dcols = if need_dx { vec![T::zero(); k * p] } else { Vec::new() };
        for i in 0..s.n {
            let cols = &cache.cols[i * k * p..(i + 1) * k * p];
            let g = dy.item(i);
            if self.weight.trainable {
                gemm(oc, p, k, g, false, cols, true, self.weight.grad.data_mut(), true);
            }
            if let Some(b) = &mut self.bias {
                if b.trainable {
                    for (ch, bg) in b.grad.data_mut().iter_mut().enumerate() {
                        *bg += g[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm(k, oc, p, self.weight.value.data(), true, g, false, &mut dcols, false);
                win.col2im(&dcols, s.c, s.h, s.w, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Stateless convenience wrapper over [`Conv2d::infer`].
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: Conv2dSpec,
    weights: &Param<T>,
    bias: Option<&Param<T>>,
) -> Result<Tensor<T>> {
    Conv2d::from_params(spec, weights.clone(), bias.cloned())?.infer(x)
}
