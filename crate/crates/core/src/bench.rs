//! Inference throughput and closed-form cost of a model configuration.
//!
//! Timing runs on the calling thread only, one image per forward pass, so
//! numbers from different configurations are comparable.

use std::time::Instant;

use crate::detector::{model_cost, Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::random_tensor;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchResult {
    pub images_per_sec: f64,
    pub params: u64,
    pub mult_adds: u64,
}

pub fn bench(cfg: &ModelConfig, n_images: usize, warmup: usize) -> Result<BenchResult> {
    if n_images == 0 {
        return Err(Error::Config("bench needs at least one image".into()));
    }
    let cost = model_cost(cfg)?;
    let model = Detector::<f32>::new(cfg.clone(), 0)?;
    let x = random_tensor(Shape::new(1, 3, cfg.input_size, cfg.input_size), 1);
    for _ in 0..warmup {
        model.infer(&x)?;
    }
    let start = Instant::now();
    for _ in 0..n_images {
        std::hint::black_box(model.infer(&x)?);
    }
    Ok(BenchResult {
        images_per_sec: n_images as f64 / start.elapsed().as_secs_f64(),
        params: cost.params,
        mult_adds: cost.mult_adds,
    })
}

/// Median throughput over `runs` invocations of [`bench`].
pub fn bench_median(cfg: &ModelConfig, n_images: usize, warmup: usize, runs: usize) -> Result<BenchResult> {
    let mut results = (0..runs.max(1))
        .map(|_| bench(cfg, n_images, warmup))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.images_per_sec.total_cmp(&b.images_per_sec));
    Ok(results[results.len() / 2])
}
