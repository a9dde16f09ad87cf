//! Greedy non-maximum suppression.

use std::cmp::Ordering;

use super::boxes::{iou, CornerBox};

pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_TOP_K: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Category id, `0..num_categories`.
    pub category: usize,
    pub score: f64,
    /// Normalised corner box.
    pub bbox: CornerBox,
}

/// Descending score, ties broken by original position.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Keeps boxes in descending score, dropping any with IoU above
/// `iou_threshold` against an already kept box; at most `top_k` survive.
/// Callers pass one category at a time.
pub fn nms(dets: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        if kept.len() >= top_k {
            break;
        }
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    fn det(score: f64, b: (f64, f64, f64, f64)) -> Detection {
        Detection {
            category: 0,
            score,
            bbox: CornerBox::new(b.0, b.1, b.2, b.3),
        }
    }

    /// Full pairwise matrix, then a fixed-point pass: a box survives iff no
    /// surviving box ranked strictly before it overlaps it too much.
    fn brute_force(dets: &[Detection], thr: f64, top_k: usize) -> Vec<Detection> {
        let n = dets.len();
        let mut rank: Vec<usize> = (0..n).collect();
        for a in 0..n {
            for b in a + 1..n {
                let (x, y) = (rank[a], rank[b]);
                if dets[y].score > dets[x].score || (dets[y].score == dets[x].score && y < x) {
                    rank.swap(a, b);
                }
            }
        }
        let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou(&dets[i].bbox, &dets[j].bbox)).collect()).collect();
        let mut alive = vec![false; n];
        for (r, &i) in rank.iter().enumerate() {
            alive[i] = rank[..r].iter().all(|&j| !alive[j] || m[j][i] <= thr);
        }
        rank.into_iter().filter(|&i| alive[i]).take(top_k).map(|i| dets[i]).collect()
    }

    #[test]
    fn single_detection_kept() {
        let d = [det(0.3, (0.0, 0.0, 1.0, 1.0))];
        assert_eq!(nms(&d, 0.45, 200), d.to_vec());
    }

    #[test]
    fn duplicate_suppressed() {
        let b = (0.1, 0.1, 0.5, 0.5);
        let d = [det(0.8, b), det(0.9, b)];
        assert_eq!(nms(&d, 0.45, 200), vec![det(0.9, b)]);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = seeded_rng(77);
        for trial in 0..1000 {
            let n = rng.gen_range(0..=50);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.0..0.8);
                    let y: f64 = rng.gen_range(0.0..0.8);
                    // Coarse scores so ties occur.
                    let s = (rng.gen_range(0..20) as f64) / 20.0;
                    det(s, (x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3)))
                })
                .collect();
            let top_k = if trial % 4 == 0 { 5 } else { 200 };
            let got = nms(&dets, 0.45, top_k);
            assert_eq!(got, brute_force(&dets, 0.45, top_k), "trial {trial}");
            assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
