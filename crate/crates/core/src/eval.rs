//! Average precision at IoU 0.5 with a small-object variant, and the
//! detections text format.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, SizeClass};
use crate::detector::{iou, CornerBox, DetectConfig, Detector};
use crate::error::{Error, Result};

pub const EVAL_IOU: f64 = 0.5;

/// One detection in pixel coordinates, tied to an image by id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub category: usize,
    pub score: f64,
    pub bbox: CornerBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub categories: Vec<String>,
    /// `None` for categories without ground truth.
    pub ap: Vec<Option<f64>>,
    pub ap_small: Vec<Option<f64>>,
    pub map: f64,
    pub map_small: f64,
    pub num_gt: Vec<usize>,
    pub num_small_gt: Vec<usize>,
    pub num_detections: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, ap) in self.categories.iter().zip(&self.ap) {
            match ap {
                Some(v) => writeln!(f, "{name}\t{v:.4}")?,
                None => writeln!(f, "{name}\tn/a")?,
            }
        }
        writeln!(f, "mAP\t{:.4}", self.map)?;
        writeln!(f, "mAP_small\t{:.4}", self.map_small)
    }
}

/// A ground-truth box for one category; ignored boxes absorb matching
/// detections without counting as positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalGt {
    pub bbox: CornerBox,
    pub ignore: bool,
}

/// Every-point interpolated AP for one category. `dets` are
/// `(image, score, box)`; `gts[image]` lists that image's boxes. Returns
/// `None` when no non-ignored ground truth exists.
pub fn average_precision(dets: &[(usize, f64, CornerBox)], gts: &[Vec<EvalGt>]) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|g| !g.ignore).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for i in order {
        let (img, _, b) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if used[img][j] {
                continue;
            }
            let o = iou(&b, &g.bbox);
            if o >= EVAL_IOU && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[img][j] = true;
                if gts[img][j].ignore {
                    continue;
                }
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    // Monotone envelope from the right, then sum precision over recall steps.
    let mut ap = 0.0;
    let mut env = 0.0f64;
    let mut steps = Vec::new();
    for &(r, p) in curve.iter().rev() {
        env = env.max(p);
        steps.push((r, env));
    }
    let mut prev_r = 0.0;
    for &(r, p) in steps.iter().rev() {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Scores `dets` against the dataset. Unknown image ids are errors.
pub fn evaluate_detections(dets: &[ImageDetection], data: &Dataset) -> Result<EvalReport> {
    let nc = data.categories.len();
    let index: std::collections::HashMap<&str, usize> =
        data.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut per_cat: Vec<Vec<(usize, f64, CornerBox)>> = vec![Vec::new(); nc];
    for d in dets {
        let img = *index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::Config(format!("detection for unknown image `{}`", d.image_id)))?;
        if d.category >= nc {
            return Err(Error::UnknownCategory(d.category.to_string()));
        }
        per_cat[d.category].push((img, d.score, d.bbox));
    }
    let gts_for = |c: usize, small_only: bool| -> Vec<Vec<EvalGt>> {
        data.samples
            .iter()
            .map(|s| {
                s.annotations
                    .iter()
                    .filter(|a| a.category == c)
                    .map(|a| EvalGt {
                        bbox: a.bbox,
                        ignore: small_only && a.size_class != SizeClass::Small,
                    })
                    .collect()
            })
            .collect()
    };
    let mut report = EvalReport {
        categories: data.categories.clone(),
        ap: Vec::with_capacity(nc),
        ap_small: Vec::with_capacity(nc),
        map: 0.0,
        map_small: 0.0,
        num_gt: vec![0; nc],
        num_small_gt: vec![0; nc],
        num_detections: dets.len(),
    };
    for a in data.samples.iter().flat_map(|s| &s.annotations) {
        report.num_gt[a.category] += 1;
        if a.size_class == SizeClass::Small {
            report.num_small_gt[a.category] += 1;
        }
    }
    for c in 0..nc {
        report.ap.push(average_precision(&per_cat[c], &gts_for(c, false)));
        report.ap_small.push(average_precision(&per_cat[c], &gts_for(c, true)));
    }
    report.map = mean_present(&report.ap);
    report.map_small = mean_present(&report.ap_small);
    Ok(report)
}

/// Runs the detector over every image (in parallel, merged in dataset
/// order) and returns pixel-space detections.
pub fn predict(model: &Detector<f32>, data: &Dataset, dcfg: &DetectConfig) -> Result<Vec<ImageDetection>> {
    const CHUNK: usize = 8;
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    let parts: Vec<Vec<ImageDetection>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<ImageDetection>> {
            let dets = model.detect(&data.batch(chunk), dcfg)?;
            Ok(chunk
                .iter()
                .zip(dets)
                .flat_map(|(&i, ds)| {
                    let s = &data.samples[i];
                    let (w, h) = (s.image.width as f64, s.image.height as f64);
                    ds.into_iter().map(move |d| ImageDetection {
                        image_id: s.id.clone(),
                        category: d.category,
                        score: d.score,
                        bbox: d.bbox.scale(w, h),
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub fn evaluate(model: &Detector<f32>, data: &Dataset, dcfg: &DetectConfig) -> Result<EvalReport> {
    evaluate_detections(&predict(model, data, dcfg)?, data)
}

/// `image_id<TAB>category<TAB>score<TAB>xmin ymin xmax ymax` per line.
pub fn format_detections(dets: &[ImageDetection], categories: &[String]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6} {:.6} {:.6} {:.6}",
            d.image_id, categories[d.category], d.score, b.xmin, b.ymin, b.xmax, b.ymax
        );
    }
    s
}

pub fn parse_detections(text: &str, categories: &[String], path: &Path) -> Result<Vec<ImageDetection>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err(line_no, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let category = categories
            .iter()
            .position(|c| c == f[1])
            .ok_or_else(|| Error::UnknownCategory(f[1].to_string()))?;
        let score: f64 = f[2].parse().map_err(|_| err(line_no, format!("bad score `{}`", f[2])))?;
        let c: Vec<f64> = f[3]
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(line_no, format!("bad box `{}`", f[3])))?;
        if c.len() != 4 {
            return Err(err(line_no, "box needs 4 coordinates".into()));
        }
        let bbox = CornerBox::try_new(c[0], c[1], c[2], c[3]).map_err(|e| err(line_no, e.to_string()))?;
        out.push(ImageDetection {
            image_id: f[0].to_string(),
            category,
            score,
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, SceneSpec, CATEGORY_NAMES};
    use crate::init::seeded_rng;
    use rand::Rng;

    fn bx(x: f64, y: f64, s: f64) -> CornerBox {
        CornerBox::new(x, y, x + s, y + s)
    }

    /// Greedy matching stated declaratively: the assignment is the unique
    /// one in which each detection, taken by descending score, holds the
    /// best-overlapping gt not held by an earlier detection. All
    /// `(G + 1)^D` assignments are enumerated and filtered by that rule.
    /// AP is then the sum over true positives of the best precision at
    /// that recall or beyond, divided by the positive count.
    fn oracle_ap(dets: &[(usize, f64, CornerBox)], gts: &[Vec<EvalGt>]) -> Option<f64> {
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
        let total = (g + 1).pow(dets.len() as u32);
        let mut found = None;
        for code in 0..total {
            let assign: Vec<Option<usize>> = (0..dets.len())
                .map(|k| {
                    let v = code / (g + 1).pow(k as u32) % (g + 1);
                    (v < g).then_some(v)
                })
                .collect();
            let mut ok = true;
            for (rank, &d) in order.iter().enumerate() {
                let taken: Vec<usize> = order[..rank].iter().filter_map(|&e| assign[e]).collect();
                let cands: Vec<(usize, f64)> = (0..g)
                    .filter(|j| !taken.contains(j) && flat[*j].0 == dets[d].0)
                    .map(|j| (j, iou(&dets[d].2, &flat[j].1.bbox)))
                    .filter(|&(_, o)| o >= EVAL_IOU)
                    .collect();
                let want = cands
                    .iter()
                    .fold(None::<(usize, f64)>, |acc, &(j, o)| match acc {
                        Some((_, bo)) if bo >= o => acc,
                        _ => Some((j, o)),
                    })
                    .map(|(j, _)| j);
                if assign[d] != want {
                    ok = false;
                    break;
                }
            }
            if ok {
                assert!(found.is_none(), "greedy assignment must be unique");
                found = Some(assign);
            }
        }
        let assign = found.expect("some assignment satisfies the rule");
        let outcome: Vec<Option<bool>> = order
            .iter()
            .map(|&d| match assign[d] {
                Some(j) if flat[j].1.ignore => None,
                Some(_) => Some(true),
                None => Some(false),
            })
            .filter(|o| o.is_some())
            .collect();
        let prec: Vec<f64> = (0..outcome.len())
            .map(|k| {
                let tp = outcome[..=k].iter().filter(|o| **o == Some(true)).count();
                tp as f64 / (k + 1) as f64
            })
            .collect();
        let mut ap = 0.0;
        for k in 0..outcome.len() {
            if outcome[k] == Some(true) {
                ap += prec[k..].iter().cloned().fold(0.0, f64::max) / npos as f64;
            }
        }
        Some(ap)
    }

    #[test]
    fn hand_case_two_tp_one_duplicate_two_fp() {
        let gts = vec![vec![
            EvalGt { bbox: bx(0.0, 0.0, 10.0), ignore: false },
            EvalGt { bbox: bx(20.0, 0.0, 10.0), ignore: false },
            EvalGt { bbox: bx(40.0, 0.0, 10.0), ignore: false },
        ]];
        let dets = vec![
            (0, 0.9, bx(0.0, 0.0, 10.0)),
            (0, 0.8, bx(60.0, 60.0, 10.0)),
            (0, 0.7, bx(1.0, 0.0, 10.0)),
            (0, 0.6, bx(20.0, 1.0, 10.0)),
            (0, 0.5, bx(80.0, 80.0, 10.0)),
        ];
        // P = 1, 1/2, 1/3, 2/4, 2/5 at R = 1/3, 1/3, 1/3, 2/3, 2/3:
        // area = 1/3 * 1 + 1/3 * 1/2.
        let ap = average_precision(&dets, &gts).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![EvalGt { bbox: bx(0.0, 0.0, 5.0), ignore: false }], vec![]];
        assert_eq!(average_precision(&[(0, 1.0, bx(0.0, 0.0, 5.0))], &gts), Some(1.0));
        assert_eq!(average_precision(&[], &gts), Some(0.0));
        assert_eq!(average_precision(&[(0, 1.0, bx(0.0, 0.0, 5.0))], &[vec![]]), None);
    }

    #[test]
    fn ignored_gt_absorbs_its_detection() {
        let gts = vec![vec![
            EvalGt { bbox: bx(0.0, 0.0, 40.0), ignore: true },
            EvalGt { bbox: bx(50.0, 50.0, 8.0), ignore: false },
        ]];
        let dets = vec![(0, 0.9, bx(0.0, 0.0, 40.0)), (0, 0.8, bx(50.0, 50.0, 8.0))];
        assert_eq!(average_precision(&dets, &gts), Some(1.0));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = seeded_rng(77);
        for trial in 0..500 {
            let n_img = rng.gen_range(1..3);
            let gts: Vec<Vec<EvalGt>> = {
                let mut left = rng.gen_range(0..5);
                (0..n_img)
                    .map(|i| {
                        let k = if i + 1 == n_img { left } else { rng.gen_range(0..=left) };
                        left -= k;
                        (0..k)
                            .map(|_| EvalGt {
                                bbox: bx(rng.gen_range(0..4) as f64 * 3.0, rng.gen_range(0..3) as f64 * 3.0, 8.0),
                                ignore: rng.gen_bool(0.25),
                            })
                            .collect()
                    })
                    .collect()
            };
            let dets: Vec<(usize, f64, CornerBox)> = (0..rng.gen_range(0..7))
                .map(|_| {
                    (
                        rng.gen_range(0..n_img),
                        rng.gen_range(0..4) as f64 / 4.0,
                        bx(rng.gen_range(0..5) as f64 * 3.0, rng.gen_range(0..4) as f64 * 3.0, 8.0),
                    )
                })
                .collect();
            let got = average_precision(&dets, &gts);
            let want = oracle_ap(&dets, &gts);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}"),
                other => panic!("trial {trial}: {other:?}"),
            }
        }
    }

    #[test]
    fn ground_truth_as_detections_scores_one() {
        let data = gen_dataset(5, &SceneSpec::default(), 40).unwrap();
        let dets: Vec<ImageDetection> = data
            .samples
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(|a| ImageDetection {
                    image_id: s.id.clone(),
                    category: a.category,
                    score: 1.0,
                    bbox: a.bbox,
                })
            })
            .collect();
        let r = evaluate_detections(&dets, &data).unwrap();
        assert!(r.ap.iter().flatten().all(|&a| a == 1.0));
        assert_eq!(r.map, 1.0);
        assert_eq!(r.map_small, 1.0);
        let empty = evaluate_detections(&[], &data).unwrap();
        assert_eq!(empty.map, 0.0);
        assert!(r.to_string().lines().any(|l| l == "mAP\t1.0000"));
        assert!(r.to_string().lines().last().unwrap().starts_with("mAP_small\t"));
    }

    #[test]
    fn detections_text_round_trip() {
        let cats: Vec<String> = CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
        let dets = vec![
            ImageDetection {
                image_id: "00003".into(),
                category: 4,
                score: 0.875,
                bbox: CornerBox::new(1.5, 2.0, 30.25, 40.0),
            },
            ImageDetection {
                image_id: "00007".into(),
                category: 0,
                score: 0.125,
                bbox: CornerBox::new(0.0, 0.0, 96.0, 96.0),
            },
        ];
        let text = format_detections(&dets, &cats);
        assert_eq!(text.lines().next().unwrap(), "00003\tperson\t0.875000\t1.500000 2.000000 30.250000 40.000000");
        assert_eq!(parse_detections(&text, &cats, Path::new("d.txt")).unwrap(), dets);
        let bad = text.replace("person", "zebra");
        assert!(matches!(
            parse_detections(&bad, &cats, Path::new("d.txt")),
            Err(Error::UnknownCategory(c)) if c == "zebra"
        ));
        assert!(parse_detections("a\tboat\t0.5\t1 2 3", &cats, Path::new("d.txt")).is_err());
    }
}
