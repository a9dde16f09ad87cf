//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Shape, Tensor};

/// RNG used throughout the crate; reproducible across platforms.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half-width of the Xavier uniform range for a conv weight of `shape`
/// (`out, in, kh, kw`): `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(shape: Shape) -> f64 {
    let area = shape.h * shape.w;
    let fan_in = shape.c * area;
    let fan_out = shape.n * area;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_init<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    xavier_with(shape, &mut seeded_rng(seed))
}

pub fn xavier_with<T: Scalar, R: Rng>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let a = xavier_bound(shape);
    let data = (0..shape.numel())
        .map(|_| T::lit(rng.gen_range(-a..a)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
