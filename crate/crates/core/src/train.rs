//! SGD with momentum, step learning-rate schedule and the training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, LoadReport};
use crate::data::Dataset;
use crate::detector::{match_priors, multibox_loss, Detector, MatchResult, ModelConfig, DEFAULT_MATCH_THRESHOLD, DEFAULT_NEG_POS_RATIO};
use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::tensor::{Param, Tensor};

pub const LOG_EVERY: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iterations: usize,
    /// `(first iteration, rate)` pairs; the first must start at 0.
    pub milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub fine_tune_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            iterations: 4000,
            milestones: vec![(0, 1e-3), (3000, 1e-4), (3500, 1e-5)],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            fine_tune_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_milestones(&self.milestones)?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        Ok(())
    }
}

pub fn validate_milestones(m: &[(usize, f64)]) -> Result<()> {
    if m.first().map(|&(i, _)| i) != Some(0) {
        return Err(Error::Config("lr milestones must start at iteration 0".into()));
    }
    for w in m.windows(2) {
        if w[1].0 <= w[0].0 || w[1].1 >= w[0].1 {
            return Err(Error::Config(
                "lr milestone iterations must increase and rates decrease".into(),
            ));
        }
    }
    if m.iter().any(|&(_, r)| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config("learning rates must be positive".into()));
    }
    Ok(())
}

/// Rate of the last milestone whose iteration is `<= iter`.
pub fn lr_at(iter: usize, milestones: &[(usize, f64)]) -> f64 {
    milestones
        .iter()
        .take_while(|&&(i, _)| i <= iter)
        .last()
        .map_or(milestones[0].1, |&(_, r)| r)
}

/// Momentum buffers, one per parameter in model order.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    /// `v = m v + g + wd w; w -= lr v`, then zeroes every gradient. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [&mut Param<f32>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        iter: usize,
    ) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                iter,
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.trainable {
                let Param { value, grad, .. } = &mut **p;
                for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                    *v = m * *v + *g + wd * *w;
                    *w -= lr * *v;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Detector<f32>,
    /// `(iteration, loss)` every [`LOG_EVERY`] iterations and at the last one.
    pub log: Vec<(usize, f64)>,
    pub fine_tune: Option<LoadReport>,
}

/// Epoch-wise shuffled batches; the final short batch of an epoch is
/// dropped unless the dataset is smaller than one batch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: crate::init::SeededRng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng: seeded_rng(seed ^ 0x5eed_ba7c),
        };
        s.pos = s.order.len();
        s
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// One forward/backward pass on `indices`; gradients are accumulated into
/// the model. Returns the loss.
pub fn accumulate_gradients(model: &mut Detector<f32>, data: &Dataset, targets: &[MatchResult], indices: &[usize]) -> Result<f64> {
    let x = data.batch(indices);
    let (out, cache) = model.forward(&x)?;
    let conf: Vec<f64> = out.conf.iter().map(|&v| v as f64).collect();
    let loc: Vec<f64> = out.loc.iter().map(|&v| v as f64).collect();
    let batch_targets: Vec<MatchResult> = indices.iter().map(|&i| targets[i].clone()).collect();
    let l = multibox_loss(&conf, &loc, &batch_targets, model.cfg.num_classes(), DEFAULT_NEG_POS_RATIO)?;
    let dloc: Vec<f32> = l.dloc.iter().map(|&v| v as f32).collect();
    let dconf: Vec<f32> = l.dconf.iter().map(|&v| v as f32).collect();
    model.backward(&cache, &dloc, &dconf);
    Ok(l.loss)
}

pub fn match_dataset(model: &Detector<f32>, data: &Dataset) -> Result<Vec<MatchResult>> {
    data.samples
        .iter()
        .map(|s| match_priors(&s.ground_truths(), &model.priors, DEFAULT_MATCH_THRESHOLD))
        .collect()
}

/// Builds the model (optionally loading name-matching weights from
/// `fine_tune_from`) and runs SGD. `on_log` sees each logged loss as it is
/// produced.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = Detector::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let fine_tune = match &cfg.fine_tune_from {
        Some(path) => Some(Checkpoint::load(path)?.load_into(&mut model)?),
        None => None,
    };
    let targets = match_dataset(&model, data)?;
    let mut sampler = BatchSampler::new(data.samples.len(), cfg.batch, cfg.seed);
    let mut sgd = Sgd::new();
    let mut log = Vec::new();
    for iter in 0..cfg.iterations {
        let idx = sampler.next();
        let loss = accumulate_gradients(&mut model, data, &targets, &idx)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: "loss".into(),
                iter,
            });
        }
        sgd.step(
            &mut model.params_mut(),
            lr_at(iter, &cfg.milestones),
            cfg.momentum,
            cfg.weight_decay,
            iter,
        )?;
        if iter % LOG_EVERY == 0 || iter + 1 == cfg.iterations {
            log.push((iter, loss));
            on_log(iter, loss);
        }
    }
    Ok(TrainOutcome { model, log, fine_tune })
}

pub fn format_loss_log(log: &[(usize, f64)]) -> String {
    log.iter().map(|(i, l)| format!("{i}\t{l:.6}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, SceneSpec};
    use crate::fusion::FusionConfig;
    use crate::init::xavier_init;
    use crate::tensor::Shape;

    fn scalar(name: &str, w: f32, g: f32) -> Param<f32> {
        let mut p = Param::new(name, Tensor::full(Shape::new(1, 1, 1, 1), w));
        p.grad.fill(g);
        p
    }

    #[test]
    fn schedule_boundaries() {
        let m = vec![(0, 1e-3), (60000, 1e-4), (70000, 1e-5)];
        assert_eq!(lr_at(0, &m), 1e-3);
        assert_eq!(lr_at(59999, &m), 1e-3);
        assert_eq!(lr_at(60000, &m), 1e-4);
        assert_eq!(lr_at(69999, &m), 1e-4);
        assert_eq!(lr_at(1 << 30, &m), 1e-5);
        let mut prev = f64::INFINITY;
        for i in (0..80000).step_by(997) {
            assert!(lr_at(i, &m) <= prev);
            prev = lr_at(i, &m);
        }
    }

    #[test]
    fn bad_milestones() {
        assert!(validate_milestones(&[(0, 1e-3), (10, 1e-3)]).is_err());
        assert!(validate_milestones(&[(0, 1e-3), (10, 1e-4), (10, 1e-5)]).is_err());
        assert!(validate_milestones(&[(5, 1e-3)]).is_err());
        assert!(validate_milestones(&[]).is_err());
        assert!(validate_milestones(&TrainConfig::default().milestones).is_ok());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = scalar("w", 1.0, 1.0);
        Sgd::new().step(&mut [&mut p], 0.1, 0.0, 0.0, 0).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(p.grad.data()[0], 0.0);

        let mut p = scalar("w", 0.0, 0.0);
        let mut sgd = Sgd::new();
        let mut traj = Vec::new();
        for _ in 0..2 {
            p.grad.fill(1.0);
            sgd.step(&mut [&mut p], 0.1, 0.9, 0.0, 0).unwrap();
            traj.push(p.value.data()[0]);
        }
        assert!((traj[0] + 0.1).abs() < 1e-7);
        assert!((traj[1] + 0.29).abs() < 1e-7);

        let mut p = scalar("w", 3.0, 0.0);
        Sgd::new().step(&mut [&mut p], 0.5, 0.9, 0.0, 0).unwrap();
        assert_eq!(p.value.data()[0], 3.0);
    }

    #[test]
    fn plain_gd_on_a_quadratic() {
        // f(w) = (w - 2)^2 / 2 gives w_k = 2 + (w_0 - 2)(1 - lr)^k.
        let mut p = scalar("w", -1.0, 0.0);
        let mut sgd = Sgd::new();
        for k in 1..=30 {
            let w = p.value.data()[0];
            p.grad.fill(w - 2.0);
            sgd.step(&mut [&mut p], 0.25, 0.0, 0.0, k).unwrap();
            let expect = 2.0 - 3.0 * 0.75f64.powi(k as i32);
            assert!((p.value.data()[0] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn weight_decay_and_frozen() {
        let mut p = scalar("w", 2.0, 0.0);
        let mut q = scalar("q", 2.0, 5.0);
        q.trainable = false;
        Sgd::new().step(&mut [&mut p, &mut q], 0.1, 0.0, 0.5, 0).unwrap();
        assert!((p.value.data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(q.value.data()[0], 2.0);
        assert_eq!(q.grad.data()[0], 0.0);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut a = scalar("ok", 1.0, 1.0);
        let mut b = scalar("broken", 1.0, f32::NAN);
        let err = Sgd::new().step(&mut [&mut a, &mut b], 0.1, 0.9, 0.0, 17).unwrap_err();
        match err {
            Error::NonFiniteGradient { param, iter } => {
                assert_eq!(param, "broken");
                assert_eq!(iter, 17);
            }
            e => panic!("{e}"),
        }
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn xavier_statistics() {
        let shape = Shape::new(64, 32, 7, 7);
        let (fan_in, fan_out) = (32.0 * 49.0, 64.0 * 49.0);
        let a = (6.0f64 / (fan_in + fan_out)).sqrt();
        let t: Tensor<f64> = xavier_init(shape, 3);
        let n = t.data().len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se);
        assert!((var / (a * a / 3.0) - 1.0).abs() < 0.05);
        assert!(t.data().iter().all(|v| v.abs() < a));
        let again: Tensor<f64> = xavier_init(shape, 3);
        assert_eq!(t, again);
    }

    #[test]
    fn zero_iterations_is_initialisation() {
        let data = gen_dataset(1, &SceneSpec::default(), 2).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&ModelConfig::default(), &cfg, &data, |_, _| {}).unwrap();
        let init = Detector::<f32>::new(ModelConfig::default(), 4).unwrap();
        assert_eq!(Checkpoint::from_model(&out.model), Checkpoint::from_model(&init));
        assert!(out.log.is_empty());
    }

    #[test]
    fn overfits_one_batch() {
        let data = gen_dataset(8, &SceneSpec::default(), 2).unwrap();
        let model_cfg = ModelConfig::default();
        let mut model = Detector::<f32>::new(model_cfg, 1).unwrap();
        let targets = match_dataset(&model, &data).unwrap();
        let mut sgd = Sgd::new();
        let mut losses = Vec::new();
        for iter in 0..200 {
            losses.push(accumulate_gradients(&mut model, &data, &targets, &[0, 1]).unwrap());
            sgd.step(&mut model.params_mut(), 1e-2, 0.9, 0.0, iter).unwrap();
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "loss {head} -> {tail}");
    }

    #[test]
    fn training_is_reproducible_and_fine_tune_copies() {
        let data = gen_dataset(2, &SceneSpec::default(), 6).unwrap();
        let cfg = TrainConfig {
            batch: 2,
            iterations: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&ModelConfig::default(), &cfg, &data, |_, _| {}).unwrap();
        let b = train(&ModelConfig::default(), &cfg, &data, |_, _| {}).unwrap();
        let ca = Checkpoint::from_model(&a.model);
        assert_eq!(ca.to_bytes().unwrap(), Checkpoint::from_model(&b.model).to_bytes().unwrap());
        assert_eq!(a.log.iter().map(|l| l.0).collect::<Vec<_>>(), vec![0, 2]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ffsd");
        ca.save(&path).unwrap();
        let ft = TrainConfig {
            iterations: 0,
            fine_tune_from: Some(path),
            ..cfg
        };
        let fused_cfg = ModelConfig::default().with_fusion(FusionConfig::eltsum(16));
        let out = train(&fused_cfg, &ft, &data, |_, _| {}).unwrap();
        let rep = out.fine_tune.unwrap();
        assert!(!rep.loaded.is_empty() && !rep.fresh.is_empty());
        for name in &rep.loaded {
            let src = ca.get(name).unwrap();
            let dst = out.model.params().into_iter().find(|p| &p.name == name).unwrap();
            assert!(src.data.iter().zip(dst.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
