//! ReLU and 2×2 max pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = T::zero();
        }
    });
}

/// Masks `dy` by the forward output: gradient flows only where `y > 0`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(y.shape(), dy.shape(), "relu backward: shape mismatch");
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Flat index of the winning input element for each pooled output.
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: Shape,
    argmax: Vec<u32>,
}

/// 2×2 / stride-2 max pooling. Ties go to the first element in row-major
/// window order.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidShape(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + s.w, top + s.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[k] = src[best];
                argmax.push(best as u32);
                k += 1;
            }
        }
    }
    Ok((
        out,
        PoolCache {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(dy.data().len(), cache.argmax.len(), "maxpool backward: bad upstream shape");
    let mut dx = Tensor::zeros(cache.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(dy.data()) {
        d[idx as usize] += g;
    }
    dx
}
