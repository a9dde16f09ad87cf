//! Assignment of ground truth to priors.

use super::boxes::{encode_box, iou, CornerBox};
use super::priors::PriorSet;
use crate::error::Result;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// A ground-truth object in normalised corner coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: CornerBox,
    /// Category id, `0..num_categories`.
    pub category: usize,
}

/// Per-prior training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Index of the assigned ground truth, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Class label: 0 is background, category `c` is `c + 1`.
    pub labels: Vec<usize>,
    /// Encoded offsets; zero for background priors.
    pub offsets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Bipartite best-prior assignment for every ground truth (greedy by
/// descending IoU, each prior used once), then every remaining prior whose
/// best IoU exceeds `threshold` joins its best ground truth.
pub fn match_priors(gts: &[GroundTruth], priors: &PriorSet, threshold: f64) -> Result<MatchResult> {
    let np = priors.len();
    let corners: Vec<CornerBox> = priors.boxes.iter().map(|p| p.to_corner()).collect();
    let overlaps: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| corners.iter().map(|p| iou(&g.bbox, p)).collect())
        .collect();

    let mut matched: Vec<Option<usize>> = vec![None; np];
    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(np) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if gt_done[g] {
                continue;
            }
            for (p, &o) in row.iter().enumerate() {
                if matched[p].is_none() && best.is_none_or(|(_, _, b)| o > b) {
                    best = Some((g, p, o));
                }
            }
        }
        let Some((g, p, _)) = best else { break };
        matched[p] = Some(g);
        gt_done[g] = true;
    }

    if !gts.is_empty() {
        for p in 0..np {
            if matched[p].is_some() {
                continue;
            }
            let (g, o) = overlaps
                .iter()
                .enumerate()
                .map(|(g, row)| (g, row[p]))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            if o > threshold {
                matched[p] = Some(g);
            }
        }
    }

    let mut labels = vec![0; np];
    let mut offsets = vec![[0.0; 4]; np];
    for p in 0..np {
        if let Some(g) = matched[p] {
            labels[p] = gts[g].category + 1;
            offsets[p] = encode_box(&gts[g].bbox, &priors.boxes[p], priors.variances)?;
        }
    }
    Ok(MatchResult {
        matched,
        labels,
        offsets,
    })
}
