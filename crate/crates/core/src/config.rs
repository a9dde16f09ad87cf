//! Run configuration files: `[section]` headers, `key = value` lines and
//! `#` comments. Keys left out keep their defaults; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SceneSpec, BACKGROUND_NAMES};
use crate::detector::{DetectConfig, ModelConfig, PredTap, Tap};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    /// `model.fusion` is read from the `[fusion]` section.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SceneSpec,
    pub eval: DetectConfig,
}

const SECTIONS: [&str; 5] = ["model", "fusion", "train", "data", "eval"];

struct Entry {
    line: usize,
    value: String,
}

struct Parser<'a> {
    path: &'a Path,
    sections: BTreeMap<&'static str, BTreeMap<String, Entry>>,
}

impl<'a> Parser<'a> {
    fn err(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg,
        }
    }

    fn take(&mut self, section: &'static str, key: &str) -> Option<Entry> {
        self.sections.get_mut(section).and_then(|s| s.remove(key))
    }

    fn set<T: FromStr>(&mut self, section: &'static str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(e) = self.take(section, key) {
            *slot = e
                .value
                .parse()
                .map_err(|_| self.err(e.line, format!("[{section}] {key}: cannot parse `{}`", e.value)))?;
        }
        Ok(())
    }

    fn set_with<T>(
        &mut self,
        section: &'static str,
        key: &str,
        slot: &mut T,
        f: impl FnOnce(&str) -> Option<T>,
    ) -> Result<()> {
        if let Some(e) = self.take(section, key) {
            *slot = f(&e.value).ok_or_else(|| self.err(e.line, format!("[{section}] {key}: cannot parse `{}`", e.value)))?;
        }
        Ok(())
    }
}

fn list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn pair2<T: FromStr>(s: &str) -> Option<(T, T)> {
    let mut v: Vec<T> = list(s)?;
    if v.len() != 2 {
        return None;
    }
    let b = v.pop()?;
    let a = v.pop()?;
    Some((a, b))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut p = Parser {
            path,
            sections: BTreeMap::new(),
        };
        let mut current: Option<&'static str> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                current = Some(
                    *SECTIONS
                        .iter()
                        .find(|s| **s == name)
                        .ok_or_else(|| p.err(line_no, format!("unknown section [{name}]")))?,
                );
                continue;
            }
            let section = current.ok_or_else(|| p.err(line_no, "key outside of any section".into()))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| p.err(line_no, format!("[{section}] expected `key = value`")))?;
            let entry = Entry {
                line: line_no,
                value: v.trim().to_string(),
            };
            if p.sections.entry(section).or_default().insert(k.trim().to_string(), entry).is_some() {
                return Err(p.err(line_no, format!("[{section}] {} given twice", k.trim())));
            }
        }

        let mut cfg = RunConfig::default();
        let m = &mut cfg.model;
        p.set("model", "input_size", &mut m.input_size)?;
        p.set_with("model", "stage_channels", &mut m.stage_channels, list)?;
        p.set("model", "fc6_channels", &mut m.fc6_channels)?;
        p.set("model", "fc6_dilation", &mut m.fc6_dilation)?;
        p.set("model", "extra_channels", &mut m.extra_channels)?;
        p.set("model", "max_scale", &mut m.max_scale)?;
        p.set("model", "num_categories", &mut m.num_categories)?;
        p.set_with("model", "variances", &mut m.variances, pair2)?;
        let mut taps: Vec<Tap> = m.pred_taps.iter().map(|t| t.tap).collect();
        p.set_with("model", "pred_taps", &mut taps, list)?;
        let defaults = ModelConfig::default().pred_taps;
        let mut pred = Vec::new();
        for tap in taps {
            let mut pt = defaults.iter().find(|d| d.tap == tap).cloned().unwrap_or(PredTap {
                tap,
                scale: f64::NAN,
                aspect_ratios: vec![1.0],
            });
            p.set("model", &format!("tap.{tap}.scale"), &mut pt.scale)?;
            p.set_with("model", &format!("tap.{tap}.aspect_ratios"), &mut pt.aspect_ratios, list)?;
            pred.push(pt);
        }
        m.pred_taps = pred;

        let f: &mut FusionConfig = &mut m.fusion;
        p.set("fusion", "mode", &mut f.mode)?;
        p.set("fusion", "layers", &mut f.layers)?;
        p.set("fusion", "branch_kernels", &mut f.branch_kernels)?;
        p.set_with("fusion", "reduce_kernels", &mut f.reduce_kernels, |s| match s {
            "auto" => Some(None),
            _ => s.parse().ok().map(Some),
        })?;
        p.set("fusion", "norm_scale_shallow", &mut f.norm_scale_shallow)?;
        p.set("fusion", "norm_scale_deep", &mut f.norm_scale_deep)?;
        p.set("fusion", "norm_scale_third", &mut f.norm_scale_third)?;
        p.set("fusion", "deconv_trainable", &mut f.deconv_trainable)?;

        let t = &mut cfg.train;
        p.set("train", "batch", &mut t.batch)?;
        p.set("train", "iterations", &mut t.iterations)?;
        p.set_with("train", "milestones", &mut t.milestones, |s| {
            s.split(',')
                .map(|m| {
                    let (i, r) = m.trim().split_once(':')?;
                    Some((i.trim().parse().ok()?, r.trim().parse().ok()?))
                })
                .collect()
        })?;
        p.set("train", "momentum", &mut t.momentum)?;
        p.set("train", "weight_decay", &mut t.weight_decay)?;
        p.set("train", "seed", &mut t.seed)?;
        p.set_with("train", "fine_tune_from", &mut t.fine_tune_from, |s| Some(Some(PathBuf::from(s))))?;

        let d = &mut cfg.data;
        p.set("data", "canvas", &mut d.canvas)?;
        for (b, name) in BACKGROUND_NAMES.iter().enumerate() {
            p.set_with("data", &format!("affinity.{name}"), &mut d.affinity[b], list)?;
        }
        p.set_with("data", "small_size", &mut d.small_size, pair2)?;
        p.set_with("data", "large_size", &mut d.large_size, pair2)?;
        p.set("data", "p_small", &mut d.p_small)?;
        p.set_with("data", "objects", &mut d.objects, pair2)?;
        p.set("data", "max_pair_iou", &mut d.max_pair_iou)?;
        p.set("data", "placement_retries", &mut d.placement_retries)?;
        p.set("data", "small_contrast", &mut d.small_contrast)?;
        p.set("data", "noise", &mut d.noise)?;
        p.set("data", "clutter", &mut d.clutter)?;

        let e = &mut cfg.eval;
        p.set("eval", "score_threshold", &mut e.score_threshold)?;
        p.set("eval", "nms_iou", &mut e.nms_iou)?;
        p.set("eval", "top_k", &mut e.top_k)?;

        if let Some((section, key, line)) = p
            .sections
            .iter()
            .flat_map(|(s, keys)| keys.iter().map(move |(k, e)| (*s, k.clone(), e.line)))
            .min_by_key(|x| x.2)
        {
            return Err(p.err(line, format!("[{section}] unknown key `{key}`")));
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.canvas != self.model.input_size {
            return Err(Error::Config(format!(
                "data canvas {} differs from model input_size {}",
                self.data.canvas, self.model.input_size
            )));
        }
        if self.pred_tap_scales_missing() {
            return Err(Error::Config("every prediction tap needs a scale".into()));
        }
        Ok(())
    }

    fn pred_tap_scales_missing(&self) -> bool {
        self.model.pred_taps.iter().any(|t| !t.scale.is_finite())
    }

    /// Every field, in a form [`RunConfig::parse`] reads back to an equal value.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "input_size = {}", m.input_size);
        let _ = writeln!(s, "stage_channels = {}", join(&m.stage_channels));
        let _ = writeln!(s, "fc6_channels = {}", m.fc6_channels);
        let _ = writeln!(s, "fc6_dilation = {}", m.fc6_dilation);
        let _ = writeln!(s, "extra_channels = {}", m.extra_channels);
        let _ = writeln!(s, "max_scale = {}", m.max_scale);
        let _ = writeln!(s, "num_categories = {}", m.num_categories);
        let _ = writeln!(s, "variances = {}, {}", m.variances.0, m.variances.1);
        let taps: Vec<Tap> = m.pred_taps.iter().map(|t| t.tap).collect();
        let _ = writeln!(s, "pred_taps = {}", join(&taps));
        for t in &m.pred_taps {
            let _ = writeln!(s, "tap.{}.scale = {}", t.tap, t.scale);
            let _ = writeln!(s, "tap.{}.aspect_ratios = {}", t.tap, join(&t.aspect_ratios));
        }
        let f = &m.fusion;
        let _ = writeln!(s, "\n[fusion]");
        let _ = writeln!(s, "mode = {}", f.mode);
        let _ = writeln!(s, "layers = {}", f.layers);
        let _ = writeln!(s, "branch_kernels = {}", f.branch_kernels);
        match f.reduce_kernels {
            Some(k) => writeln!(s, "reduce_kernels = {k}"),
            None => writeln!(s, "reduce_kernels = auto"),
        }
        .expect("write to string");
        let _ = writeln!(s, "norm_scale_shallow = {}", f.norm_scale_shallow);
        let _ = writeln!(s, "norm_scale_deep = {}", f.norm_scale_deep);
        let _ = writeln!(s, "norm_scale_third = {}", f.norm_scale_third);
        let _ = writeln!(s, "deconv_trainable = {}", f.deconv_trainable);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let ms: Vec<String> = t.milestones.iter().map(|(i, r)| format!("{i}:{r}")).collect();
        let _ = writeln!(s, "milestones = {}", ms.join(", "));
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "seed = {}", t.seed);
        if let Some(p) = &t.fine_tune_from {
            let _ = writeln!(s, "fine_tune_from = {}", p.display());
        }
        let d = &self.data;
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "canvas = {}", d.canvas);
        for (name, row) in BACKGROUND_NAMES.iter().zip(&d.affinity) {
            let _ = writeln!(s, "affinity.{name} = {}", join(row));
        }
        let _ = writeln!(s, "small_size = {}, {}", d.small_size.0, d.small_size.1);
        let _ = writeln!(s, "large_size = {}, {}", d.large_size.0, d.large_size.1);
        let _ = writeln!(s, "p_small = {}", d.p_small);
        let _ = writeln!(s, "objects = {}, {}", d.objects.0, d.objects.1);
        let _ = writeln!(s, "max_pair_iou = {}", d.max_pair_iou);
        let _ = writeln!(s, "placement_retries = {}", d.placement_retries);
        let _ = writeln!(s, "small_contrast = {}", d.small_contrast);
        let _ = writeln!(s, "noise = {}", d.noise);
        let _ = writeln!(s, "clutter = {}", d.clutter);
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "score_threshold = {}", e.score_threshold);
        let _ = writeln!(s, "nms_iou = {}", e.nms_iou);
        let _ = writeln!(s, "top_k = {}", e.top_k);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionLayers, FusionMode};
    use crate::init::seeded_rng;
    use rand::Rng;

    fn round_trip(cfg: &RunConfig) {
        let text = cfg.render();
        let back = RunConfig::parse(&text, Path::new("r.cfg")).unwrap();
        assert_eq!(&back, cfg, "{text}");
        assert_eq!(back.render(), text);
    }

    #[test]
    fn default_round_trips() {
        round_trip(&RunConfig::default());
        assert_eq!(RunConfig::parse("", Path::new("e.cfg")).unwrap(), RunConfig::default());
    }

    #[test]
    fn randomised_round_trips() {
        let mut rng = seeded_rng(12);
        for _ in 0..200 {
            let mut c = RunConfig::default();
            c.model.fusion = FusionConfig {
                mode: [FusionMode::None, FusionMode::Concat, FusionMode::Eltsum][rng.gen_range(0..3)],
                layers: [FusionLayers::Conv4Conv5, FusionLayers::Conv4Fc6, FusionLayers::Conv3Conv4Conv5][rng.gen_range(0..3)],
                branch_kernels: rng.gen_range(1..600),
                reduce_kernels: rng.gen_bool(0.5).then(|| rng.gen_range(1..600)),
                norm_scale_shallow: rng.gen_range(0.5..30.0),
                norm_scale_deep: rng.gen::<f64>() * 40.0 + 0.1,
                norm_scale_third: 1.0 / 3.0,
                deconv_trainable: rng.gen(),
            };
            c.model.pred_taps[1].aspect_ratios = vec![1.0, rng.gen_range(1.0..4.0), 1.0 / 7.0];
            c.model.pred_taps[0].scale = rng.gen_range(0.01..0.2);
            c.train.iterations = rng.gen_range(0..100_000);
            c.train.milestones = vec![(0, rng.gen_range(1e-3..1e-1)), (rng.gen_range(1..9000), 1e-4), (9000, 3e-6)];
            c.train.seed = rng.gen();
            c.train.weight_decay = rng.gen_range(0.0..1e-3);
            c.train.fine_tune_from = rng.gen_bool(0.5).then(|| PathBuf::from("runs/base model.ffsd"));
            c.data.p_small = rng.gen();
            c.data.noise = rng.gen_range(0.0..20.0);
            c.eval.score_threshold = rng.gen_range(0.0..0.1);
            c.eval.top_k = rng.gen_range(1..500);
            round_trip(&c);
        }
    }

    #[test]
    fn comments_and_partial_files() {
        let text = "# acceptance\n[fusion]\nmode = concat  # fused\nbranch_kernels = 128\n\n[train]\niterations = 10\n";
        let c = RunConfig::parse(text, Path::new("a.cfg")).unwrap();
        assert_eq!(c.model.fusion.mode, FusionMode::Concat);
        assert_eq!(c.model.fusion.branch_kernels, 128);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.data, SceneSpec::default());
    }

    #[test]
    fn errors_name_section_key_and_line() {
        let check = |text: &str, line: usize, needle: &str| match RunConfig::parse(text, Path::new("x.cfg")) {
            Err(Error::Parse { line: l, msg, .. }) => {
                assert_eq!(l, line, "{msg}");
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("{other:?}"),
        };
        check("[model]\ninput_size = 96\nwidth = 3\n", 3, "[model] unknown key `width`");
        check("[train]\n\nbatch = many\n", 3, "[train] batch");
        check("[optim]\n", 1, "unknown section");
        check("batch = 3\n", 1, "outside");
        check("[eval]\ntop_k = 1\ntop_k = 2\n", 3, "twice");
        check("[model]\ntap.conv3a.scale = 0.1\n", 2, "unknown key `tap.conv3a.scale`");
        check("[data]\nsmall_size = 3\n", 2, "small_size");
        assert!(matches!(
            RunConfig::parse("[data]\ncanvas = 64\n", Path::new("x.cfg")),
            Err(Error::Config(_))
        ));
    }
}
