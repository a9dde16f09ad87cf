//! Reference implementations used by the acceptance suite. They favour
//! directness over speed and share no code with the library paths they
//! check.

use ffssd_core::detector::{iou, CornerBox, Detection};
use ffssd_core::eval::EvalGt;

/// Rank by (score desc, index asc) via pairwise swaps, then a box
/// survives iff no surviving higher-ranked box overlaps it above `thr`.
pub fn nms_oracle(dets: &[Detection], thr: f64, top_k: usize) -> Vec<Detection> {
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
    let mut alive = vec![false; n];
    for (r, &i) in rank.iter().enumerate() {
        alive[i] = rank[..r]
            .iter()
            .all(|&j| !alive[j] || iou(&dets[j].bbox, &dets[i].bbox) <= thr);
    }
    rank.into_iter().filter(|&i| alive[i]).take(top_k).map(|i| dets[i]).collect()
}

/// Enumerates all `(G + 1)^D` detection-to-gt assignments and keeps the one
/// where each detection, by descending score, holds the best-IoU (>= 0.5)
/// gt of its image not held by an earlier detection. AP is the sum over
/// true positives of the best precision at or after that rank, over the
/// positive count.
pub fn ap_oracle(dets: &[(usize, f64, CornerBox)], gts: &[Vec<EvalGt>]) -> Option<f64> {
    let flat: Vec<(usize, EvalGt)> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |g| (i, *g)))
        .collect();
    let npos = flat.iter().filter(|g| !g.1.ignore).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let g = flat.len();
    let mut chosen = None;
    for code in 0..(g + 1).pow(dets.len() as u32) {
        let assign: Vec<Option<usize>> = (0..dets.len())
            .map(|k| {
                let v = code / (g + 1).pow(k as u32) % (g + 1);
                (v < g).then_some(v)
            })
            .collect();
        let consistent = order.iter().enumerate().all(|(rank, &d)| {
            let taken: Vec<usize> = order[..rank].iter().filter_map(|&e| assign[e]).collect();
            let mut want: Option<(usize, f64)> = None;
            for j in 0..g {
                if taken.contains(&j) || flat[j].0 != dets[d].0 {
                    continue;
                }
                let o = iou(&dets[d].2, &flat[j].1.bbox);
                if o >= 0.5 && want.map_or(true, |(_, w)| o > w) {
                    want = Some((j, o));
                }
            }
            assign[d] == want.map(|w| w.0)
        });
        if consistent {
            assert!(chosen.is_none(), "greedy assignment is not unique");
            chosen = Some(assign);
        }
    }
    let assign = chosen.expect("no consistent assignment");
    let outcome: Vec<bool> = order
        .iter()
        .filter_map(|&d| match assign[d] {
            Some(j) if flat[j].1.ignore => None,
            Some(_) => Some(true),
            None => Some(false),
        })
        .collect();
    let prec: Vec<f64> = (0..outcome.len())
        .map(|k| outcome[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    Some(
        (0..outcome.len())
            .filter(|&k| outcome[k])
            .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max) / npos as f64)
            .sum(),
    )
}
