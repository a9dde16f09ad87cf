//! Multibox objective: smooth-L1 localisation on positives plus softmax
//! cross-entropy on positives and mined hard negatives.

use super::matching::MatchResult;
use crate::error::{Error, Result};

pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;

#[derive(Clone, Debug, Default)]
pub struct LossOutput {
    pub loss: f64,
    pub loc_loss: f64,
    pub conf_loss: f64,
    pub num_pos: usize,
    pub num_neg: usize,
    /// Gradient w.r.t. the `(batch, prior, 4)` offsets.
    pub dloc: Vec<f64>,
    /// Gradient w.r.t. the `(batch, prior, classes)` logits.
    pub dconf: Vec<f64>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

/// `conf` holds `num_classes` logits per prior (class 0 is background),
/// `loc` four offsets per prior, both laid out `(batch, prior, ·)`.
/// Losses are summed and divided by the total positive count `N`; with
/// `N = 0` the loss and all gradients are zero.
pub fn multibox_loss(
    conf: &[f64],
    loc: &[f64],
    targets: &[MatchResult],
    num_classes: usize,
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    let batch = targets.len();
    let np = targets.first().map_or(0, |t| t.labels.len());
    if targets.iter().any(|t| t.labels.len() != np || t.offsets.len() != np)
        || conf.len() != batch * np * num_classes
        || loc.len() != batch * np * 4
    {
        return Err(Error::Config(format!(
            "multibox_loss: misaligned inputs (conf {}, loc {}, {batch} images of {np} priors, {num_classes} classes)",
            conf.len(),
            loc.len()
        )));
    }
    let mut out = LossOutput {
        dloc: vec![0.0; loc.len()],
        dconf: vec![0.0; conf.len()],
        ..Default::default()
    };
    let total_pos: usize = targets.iter().map(|t| t.num_positive()).sum();
    if total_pos == 0 {
        return Ok(out);
    }
    let inv_n = 1.0 / total_pos as f64;
    let mut logp = vec![0.0; num_classes];

    for (b, t) in targets.iter().enumerate() {
        let conf_b = &conf[b * np * num_classes..(b + 1) * np * num_classes];
        let loc_b = &loc[b * np * 4..(b + 1) * np * 4];
        let npos = t.num_positive();

        let mut selected = vec![false; np];
        let mut neg_loss: Vec<(usize, f64)> = Vec::new();
        for p in 0..np {
            let logits = &conf_b[p * num_classes..(p + 1) * num_classes];
            if t.matched[p].is_some() {
                selected[p] = true;
                for d in 0..4 {
                    let diff = loc_b[p * 4 + d] - t.offsets[p][d];
                    out.loc_loss += smooth_l1(diff);
                    out.dloc[(b * np + p) * 4 + d] = smooth_l1_grad(diff) * inv_n;
                }
            } else {
                log_softmax(logits, &mut logp);
                neg_loss.push((p, -logp[0]));
            }
        }
        let k = ((neg_pos_ratio * npos as f64).floor() as usize).min(neg_loss.len());
        neg_loss.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(p, _) in &neg_loss[..k] {
            selected[p] = true;
        }
        out.num_neg += k;

        for p in (0..np).filter(|&p| selected[p]) {
            let logits = &conf_b[p * num_classes..(p + 1) * num_classes];
            log_softmax(logits, &mut logp);
            let label = t.labels[p];
            out.conf_loss -= logp[label];
            let g = &mut out.dconf[(b * np + p) * num_classes..(b * np + p + 1) * num_classes];
            for (c, gv) in g.iter_mut().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                *gv = (logp[c].exp() - onehot) * inv_n;
            }
        }
    }
    out.num_pos = total_pos;
    out.loc_loss *= inv_n;
    out.conf_loss *= inv_n;
    out.loss = out.loc_loss + out.conf_loss;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    fn targets(labels: Vec<usize>, offsets: Vec<[f64; 4]>) -> MatchResult {
        MatchResult {
            matched: labels.iter().map(|&l| (l > 0).then_some(0)).collect(),
            labels,
            offsets,
        }
    }

    #[test]
    fn saturated_background_tends_to_zero() {
        let t = targets(vec![1, 0, 0], vec![[0.0; 4]; 3]);
        // Positive confidently right, negatives confidently background.
        let conf = vec![-50.0, 50.0, 50.0, -50.0, 50.0, -50.0];
        let out = multibox_loss(&conf, &[0.0; 12], &[t], 2, 3.0).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-20);
    }

    #[test]
    fn perfect_localisation_has_zero_loc_loss() {
        let off = [0.3, -1.7, 0.2, 2.5];
        let t = targets(vec![0, 2], vec![[0.0; 4], off]);
        let mut loc = vec![0.0; 8];
        loc[4..].copy_from_slice(&off);
        let out = multibox_loss(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &loc, &[t], 3, 3.0).unwrap();
        assert_eq!(out.loc_loss, 0.0);
        assert!(out.dloc.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_computed_three_priors() {
        // Prior 0 positive (class 1), priors 1 and 2 negatives; ratio 1 keeps
        // only the harder negative (prior 2).
        let t = targets(vec![1, 0, 0], vec![[0.5, -2.0, 0.0, 1.0], [0.0; 4], [0.0; 4]]);
        let loc = [0.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let conf = [0.0, 1.0, 2.0, 0.0, 0.0, 3.0];
        let out = multibox_loss(&conf, &loc, &[t], 2, 1.0).unwrap();
        // smooth-L1 of (-0.5, 2, 0, -1) = 0.125 + 1.5 + 0 + 0.5
        let loc_want = 2.125;
        // CE(pos) = ln(1 + e^-1); CE(prior 2, bg) = ln(1 + e^3); prior 1's
        // background loss ln(1 + e^-2) is smaller, so it is not mined.
        let conf_want = (1.0 + (-1.0f64).exp()).ln() + (1.0 + 3.0f64.exp()).ln();
        assert!((out.loc_loss - loc_want).abs() < 1e-12);
        assert!((out.conf_loss - conf_want).abs() < 1e-12);
        assert_eq!((out.num_pos, out.num_neg), (1, 1));
        assert!(out.dconf[2..4].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn no_positives_means_zero_everything() {
        let t = targets(vec![0, 0], vec![[0.0; 4]; 2]);
        let out = multibox_loss(&[1.0, -1.0, 2.0, 0.0], &[0.5; 8], &[t], 2, 3.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.dconf.iter().chain(&out.dloc).all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_misaligned_inputs() {
        let t = targets(vec![1, 0], vec![[0.0; 4]; 2]);
        assert!(multibox_loss(&[0.0; 3], &[0.0; 8], &[t.clone()], 2, 3.0).is_err());
        assert!(multibox_loss(&[0.0; 4], &[0.0; 7], &[t], 2, 3.0).is_err());
    }

    #[test]
    fn hard_negatives_capped_at_ratio() {
        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let np = 40;
            let labels: Vec<usize> = (0..np).map(|_| if rng.gen_bool(0.1) { rng.gen_range(1..4) } else { 0 }).collect();
            let t = targets(labels, vec![[0.0; 4]; np]);
            let conf: Vec<f64> = (0..np * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = multibox_loss(&conf, &vec![0.0; np * 4], &[t.clone()], 4, 3.0).unwrap();
            let npos = t.num_positive();
            assert_eq!(out.num_neg, (3 * npos).min(np - npos));
            assert!(out.loss >= 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(9);
        for _ in 0..20 {
            let (batch, np, nc) = (2, 12, 4);
            let tg: Vec<MatchResult> = (0..batch)
                .map(|_| {
                    let labels: Vec<usize> = (0..np).map(|_| if rng.gen_bool(0.25) { rng.gen_range(1..nc) } else { 0 }).collect();
                    let offsets = (0..np)
                        .map(|_| [0; 4].map(|_: i32| rng.gen_range(-2.0..2.0)))
                        .collect();
                    targets(labels, offsets)
                })
                .collect();
            let conf: Vec<f64> = (0..batch * np * nc).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let loc: Vec<f64> = (0..batch * np * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let base = multibox_loss(&conf, &loc, &tg, nc, 3.0).unwrap();
            let eps = 1e-5;
            let f = |c: &[f64], l: &[f64]| multibox_loss(c, l, &tg, nc, 3.0).unwrap().loss;
            let mut worst: f64 = 0.0;
            for i in 0..conf.len() {
                let (mut a, mut b) = (conf.clone(), conf.clone());
                a[i] += eps;
                b[i] -= eps;
                let fd = (f(&a, &loc) - f(&b, &loc)) / (2.0 * eps);
                worst = worst.max((fd - base.dconf[i]).abs() / fd.abs().max(base.dconf[i].abs()).max(1.0));
            }
            for i in 0..loc.len() {
                let (mut a, mut b) = (loc.clone(), loc.clone());
                a[i] += eps;
                b[i] -= eps;
                let fd = (f(&conf, &a) - f(&conf, &b)) / (2.0 * eps);
                worst = worst.max((fd - base.dloc[i]).abs() / fd.abs().max(base.dloc[i].abs()).max(1.0));
            }
            assert!(worst < 1e-6, "max rel err {worst}");
        }
    }
}
