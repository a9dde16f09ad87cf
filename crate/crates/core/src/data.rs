//! Synthetic "contextual small objects" scenes.
//!
//! The background class predicts object identity through an affinity table.
//! Small objects are faint and two category pairs (boat/car, bird/plant) are
//! drawn identically at small sizes, so only the surroundings tell them apart.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::detector::{CornerBox, GroundTruth};
use crate::error::{Error, Result};
use crate::init::{seeded_rng, SeededRng};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const CATEGORY_NAMES: [&str; 5] = ["boat", "car", "bird", "plant", "person"];
pub const BACKGROUND_NAMES: [&str; 4] = ["sea", "sky", "road", "indoor"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Rows: backgrounds in [`BACKGROUND_NAMES`] order; columns: categories
    /// in [`CATEGORY_NAMES`] order.
    pub affinity: Vec<Vec<f64>>,
    /// Inclusive longest-side range of small objects.
    pub small_size: (usize, usize),
    pub large_size: (usize, usize),
    pub p_small: f64,
    pub objects: (usize, usize),
    pub max_pair_iou: f64,
    pub placement_retries: usize,
    /// Intensity offset of small objects from the local background.
    pub small_contrast: f64,
    /// Uniform per-channel noise amplitude.
    pub noise: f64,
    /// Upper bound on unannotated 2–3 px distractor specks.
    pub clutter: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 96,
            affinity: vec![
                vec![0.70, 0.05, 0.05, 0.00, 0.20],
                vec![0.05, 0.00, 0.75, 0.05, 0.15],
                vec![0.00, 0.70, 0.05, 0.05, 0.20],
                vec![0.00, 0.05, 0.00, 0.75, 0.20],
            ],
            small_size: (6, 14),
            large_size: (24, 48),
            p_small: 0.7,
            objects: (1, 4),
            max_pair_iou: 0.3,
            placement_retries: 30,
            small_contrast: 36.0,
            noise: 6.0,
            clutter: 4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.affinity.len() != BACKGROUND_NAMES.len() {
            return bad(format!("affinity needs {} rows", BACKGROUND_NAMES.len()));
        }
        for (b, row) in self.affinity.iter().enumerate() {
            if row.len() != CATEGORY_NAMES.len() || row.iter().any(|&p| !(p >= 0.0)) {
                return bad(format!("affinity row {} is malformed", BACKGROUND_NAMES[b]));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("affinity row {} does not sum to 1", BACKGROUND_NAMES[b]));
            }
        }
        let (s0, s1) = self.small_size;
        let (l0, l1) = self.large_size;
        if s0 < 4 || s0 > s1 || l0 > l1 || l1 > self.canvas {
            return bad("object size ranges must satisfy 4 <= min <= max <= canvas".into());
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return bad("object count range must satisfy 1 <= min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.p_small) || !(0.0..=1.0).contains(&self.max_pair_iou) {
            return bad("p_small and max_pair_iou must lie in [0, 1]".into());
        }
        if self.canvas < 16 {
            return bad("canvas too small".into());
        }
        Ok(())
    }

    /// Programmatic small-object rule: longest side at most a sixth of the
    /// canvas.
    pub fn size_class(&self, b: &CornerBox) -> SizeClass {
        if b.width().max(b.height()) <= self.canvas as f64 / 6.0 {
            SizeClass::Small
        } else {
            SizeClass::Large
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub category: usize,
    /// Pixel corners; the box covers columns `xmin..xmax`, rows `ymin..ymax`.
    pub bbox: CornerBox,
    pub size_class: SizeClass,
}

impl Annotation {
    /// Normalised ground truth for a `canvas`-sized image.
    pub fn ground_truth(&self, width: usize, height: usize) -> GroundTruth {
        GroundTruth {
            bbox: self.bbox.scale(1.0 / width as f64, 1.0 / height as f64),
            category: self.category,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.data[i + k] = c[k].round().clamp(0.0, 255.0) as u8;
        }
    }

    /// Writes `(v / 255 - 0.5) * 2` into item `i` of an NCHW tensor.
    pub fn write_normalized(&self, t: &mut Tensor<f32>, i: usize) {
        let plane = self.width * self.height;
        let dst = t.item_mut(i);
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + p] = (px[c] as f32 / 255.0 - 0.5) * 2.0;
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut t = Tensor::zeros(Shape::new(1, 3, self.height, self.width));
        self.write_normalized(&mut t, 0);
        t
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.data);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field `{s}`"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err("truncated PPM pixel data".into());
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: bytes[pos..pos + n].to_vec(),
    })
}

/// Object geometry before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub category: usize,
    pub size_class: SizeClass,
    /// Pixel box with integer corners.
    pub bbox: CornerBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub background: usize,
    pub objects: Vec<PlacedObject>,
}

/// Box `(w, h)` of a category at longest side `s`.
fn footprint(category: usize, small: bool, s: usize) -> (usize, usize) {
    let half = (s / 2).max(4);
    match (category, small) {
        // boat, car: horizontal bars
        (0 | 1, true) => (s, half),
        (0, false) => (s, (s * 3 / 4).max(4)),
        (1, false) => (s, half),
        // bird, plant: triangles
        (2 | 3, true) => (s, s),
        (2, false) => (s, (s * 3 / 5).max(4)),
        (3, false) => ((s * 3 / 5).max(4), s),
        // person: upright
        _ => (half, s),
    }
}

fn sample_layout(rng: &mut SeededRng, spec: &SceneSpec) -> SceneLayout {
    let background = rng.gen_range(0..BACKGROUND_NAMES.len());
    let pick = WeightedIndex::new(&spec.affinity[background]).expect("validated affinity row");
    let n = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let category = pick.sample(rng);
        let small = rng.gen_bool(spec.p_small);
        let (lo, hi) = if small { spec.small_size } else { spec.large_size };
        let s = rng.gen_range(lo..=hi);
        let (w, h) = footprint(category, small, s);
        let (w, h) = (w.min(spec.canvas), h.min(spec.canvas));
        for _ in 0..spec.placement_retries.max(1) {
            let x0 = rng.gen_range(0..=spec.canvas - w) as f64;
            let y0 = rng.gen_range(0..=spec.canvas - h) as f64;
            let bbox = CornerBox::new(x0, y0, x0 + w as f64, y0 + h as f64);
            if objects
                .iter()
                .all(|o| crate::detector::iou(&o.bbox, &bbox) <= spec.max_pair_iou)
            {
                objects.push(PlacedObject {
                    category,
                    size_class: spec.size_class(&bbox),
                    bbox,
                });
                break;
            }
        }
    }
    SceneLayout { background, objects }
}

/// Background, object categories and boxes of scene `seed`, without
/// rendering.
pub fn scene_layout(seed: u64, spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    Ok(sample_layout(&mut seeded_rng(seed), spec))
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

fn jitter(rng: &mut SeededRng, c: [f64; 3], amount: f64) -> [f64; 3] {
    let d = rng.gen_range(-amount..=amount);
    c.map(|v| v + d)
}

fn render_background(img: &mut RgbImage, bg: usize, rng: &mut SeededRng) {
    let (w, h) = (img.width, img.height);
    match bg {
        0 => {
            let top = jitter(rng, [40.0, 90.0, 150.0], 12.0);
            let bottom = jitter(rng, [10.0, 40.0, 90.0], 12.0);
            let phase = rng.gen_range(0.0..6.28);
            for y in 0..h {
                let base = lerp3(top, bottom, y as f64 / (h - 1) as f64);
                for x in 0..w {
                    let wave = 10.0 * (x as f64 * 0.35 + y as f64 * 0.8 + phase).sin();
                    img.put(x, y, base.map(|v| v + wave));
                }
            }
        }
        1 => {
            let top = jitter(rng, [150.0, 195.0, 235.0], 10.0);
            let bottom = jitter(rng, [185.0, 215.0, 240.0], 10.0);
            for y in 0..h {
                let c = lerp3(top, bottom, y as f64 / (h - 1) as f64);
                for x in 0..w {
                    img.put(x, y, c);
                }
            }
        }
        2 => {
            let asphalt = jitter(rng, [90.0, 90.0, 95.0], 12.0);
            let lane = jitter(rng, [170.0, 170.0, 150.0], 10.0);
            let period = 16;
            let offset = rng.gen_range(0..period);
            for y in 0..h {
                let striped = (y + offset) % period < 2;
                for x in 0..w {
                    let dash = (x / 8) % 2 == 0;
                    img.put(x, y, if striped && dash { lane } else { asphalt });
                }
            }
        }
        _ => {
            let a = jitter(rng, [200.0, 180.0, 150.0], 10.0);
            let b = jitter(rng, [150.0, 120.0, 90.0], 10.0);
            let cell = 12;
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for y in 0..h {
                for x in 0..w {
                    let odd = ((x + ox) / cell + (y + oy) / cell) % 2 == 1;
                    img.put(x, y, if odd { b } else { a });
                }
            }
        }
    }
}

fn inside_triangle(fx: f64, fy: f64, up: bool) -> bool {
    // fx, fy in [0, 1) over the box; apex at the top (up) or bottom.
    let t = if up { fy } else { 1.0 - fy };
    (fx - 0.5).abs() <= 0.5 * t + 0.5 / 8.0
}

fn inside_ellipse(fx: f64, fy: f64) -> bool {
    let (dx, dy) = (fx - 0.5, fy - 0.5);
    dx * dx + dy * dy <= 0.25
}

/// Colour of a large-object pixel, `None` where the background shows.
fn large_pixel(category: usize, fx: f64, fy: f64) -> Option<[f64; 3]> {
    match category {
        0 => {
            if fy >= 0.6 {
                Some([120.0, 70.0, 30.0])
            } else if inside_triangle((fx - 0.2) / 0.6, fy / 0.6, true) && (0.2..0.8).contains(&fx) {
                Some([245.0, 245.0, 235.0])
            } else {
                None
            }
        }
        1 => {
            let wheel = |cx: f64| {
                let (dx, dy) = ((fx - cx) / 0.12, (fy - 0.85) / 0.15);
                dx * dx + dy * dy <= 1.0
            };
            if wheel(0.22) || wheel(0.78) {
                Some([20.0, 20.0, 20.0])
            } else if fy >= 0.4 && fy < 0.85 {
                Some([200.0, 30.0, 30.0])
            } else if fy < 0.4 && (0.25..0.75).contains(&fx) {
                Some([170.0, 210.0, 230.0])
            } else {
                None
            }
        }
        2 => inside_triangle(fx, fy, false).then_some([230.0, 170.0, 20.0]),
        3 => {
            if fy >= 0.8 {
                ((0.4..0.6).contains(&fx)).then_some([100.0, 60.0, 20.0])
            } else {
                inside_triangle(fx, fy / 0.8, true).then_some([30.0, 140.0, 40.0])
            }
        }
        _ => {
            if fy < 0.3 {
                inside_ellipse(fx, fy / 0.3).then_some([230.0, 190.0, 160.0])
            } else {
                Some([60.0, 60.0, 160.0])
            }
        }
    }
}

/// Small objects are faint silhouettes; within each confusable pair the
/// silhouette is the same.
fn small_mask(category: usize, fx: f64, fy: f64) -> bool {
    match category {
        0 | 1 | 4 => true,
        _ => inside_triangle(fx, fy, true),
    }
}

fn render_object(img: &mut RgbImage, o: &PlacedObject, contrast: f64) {
    let b = o.bbox;
    let (x0, y0, x1, y1) = (b.xmin as usize, b.ymin as usize, b.xmax as usize, b.ymax as usize);
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let fx = (x - x0) as f64 / w + 0.5 / w;
            let fy = (y - y0) as f64 / h + 0.5 / h;
            match o.size_class {
                SizeClass::Small => {
                    if small_mask(o.category, fx, fy) {
                        let bgc = img.pixel(x, y).map(|v| v as f64);
                        let mean = bgc.iter().sum::<f64>() / 3.0;
                        let d = if mean > 128.0 { -contrast } else { contrast };
                        img.put(x, y, bgc.map(|v| v + d));
                    }
                }
                SizeClass::Large => {
                    if let Some(c) = large_pixel(o.category, fx, fy) {
                        img.put(x, y, c);
                    }
                }
            }
        }
    }
}

fn render(layout: &SceneLayout, spec: &SceneSpec, rng: &mut SeededRng) -> RgbImage {
    let mut img = RgbImage::new(spec.canvas, spec.canvas);
    render_background(&mut img, layout.background, rng);
    for _ in 0..rng.gen_range(0..=spec.clutter) {
        let side = rng.gen_range(2..=3);
        let x0 = rng.gen_range(0..=spec.canvas - side);
        let y0 = rng.gen_range(0..=spec.canvas - side);
        let d = rng.gen_range(-0.5..0.5) * spec.small_contrast;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let c = img.pixel(x, y).map(|v| v as f64 + d);
                img.put(x, y, c);
            }
        }
    }
    for o in &layout.objects {
        render_object(&mut img, o, spec.small_contrast);
    }
    if spec.noise > 0.0 {
        for v in img.data.iter_mut() {
            let n = rng.gen_range(-spec.noise..=spec.noise);
            *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Deterministic scene for `(seed, spec)`.
pub fn gen_scene(seed: u64, spec: &SceneSpec, image_id: &str) -> Result<(RgbImage, SceneLayout, Vec<Annotation>)> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let layout = sample_layout(&mut rng, spec);
    let img = render(&layout, spec, &mut rng);
    let anns = layout
        .objects
        .iter()
        .map(|o| Annotation {
            image_id: image_id.to_string(),
            category: o.category,
            bbox: o.bbox,
            size_class: o.size_class,
        })
        .collect();
    Ok((img, layout, anns))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl Sample {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| a.ground_truth(self.image.width, self.image.height))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_objects(&self) -> usize {
        self.samples.iter().map(|s| s.annotations.len()).sum()
    }

    pub fn num_small(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|a| a.size_class == SizeClass::Small)
            .count()
    }

    /// Batch tensor of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let first = &self.samples[indices[0]].image;
        let mut t = Tensor::zeros(Shape::new(indices.len(), 3, first.height, first.width));
        for (slot, &i) in indices.iter().enumerate() {
            self.samples[i].image.write_normalized(&mut t, slot);
        }
        t
    }
}

pub fn image_id(index: usize) -> String {
    format!("images/{index:05}.ppm")
}

/// Scenes `seed + i` for `i in 0..count`, generated in memory.
pub fn gen_dataset(seed: u64, spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = image_id(i);
            let (image, _, annotations) = gen_scene(seed.wrapping_add(i as u64), spec, &id)?;
            Ok(Sample { id, image, annotations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
    })
}

fn format_coord(v: f64) -> String {
    format!("{v}")
}

/// Writes images and the manifest under `dir`.
pub fn write_split(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    data.samples
        .par_iter()
        .try_for_each(|s| s.image.write_ppm(&dir.join(&s.id)))?;
    let mut text = format!("#categories: {}\n", data.categories.join(","));
    for s in &data.samples {
        for a in &s.annotations {
            let b = a.bbox;
            text.push_str(&format!(
                "{}\t{}\t{} {} {} {}\t{}\n",
                s.id,
                a.category,
                format_coord(b.xmin),
                format_coord(b.ymin),
                format_coord(b.xmax),
                format_coord(b.ymax),
                a.size_class.as_str()
            ));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    crate::checkpoint::write_atomic(&path, text.as_bytes())
}

pub fn gen_split(dir: &Path, seed: u64, spec: &SceneSpec, count: usize) -> Result<Dataset> {
    let data = gen_dataset(seed, spec, count)?;
    write_split(dir, &data)?;
    Ok(data)
}

/// Reads a split written by [`write_split`]. Images appear in manifest order.
pub fn load_split(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty manifest".into()))?
        .map_err(|e| Error::io(&path, e))?;
    let cats = header
        .strip_prefix("#categories: ")
        .ok_or_else(|| parse_err(1, "missing `#categories:` header".into()))?;
    let categories: Vec<String> = if cats.is_empty() {
        Vec::new()
    } else {
        cats.split(',').map(str::to_string).collect()
    };

    let mut order: Vec<String> = Vec::new();
    let mut anns: Vec<Vec<Annotation>> = Vec::new();
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let category: usize = f[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad category id `{}`", f[1])))?;
        if category >= categories.len() {
            return Err(parse_err(lineno, format!("category id {category} out of range")));
        }
        let c: Vec<f64> = f[2]
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(lineno, format!("bad box `{}`", f[2])))?;
        if c.len() != 4 {
            return Err(parse_err(lineno, format!("box needs 4 numbers, found {}", c.len())));
        }
        let bbox = CornerBox::try_new(c[0], c[1], c[2], c[3]).map_err(|e| parse_err(lineno, e.to_string()))?;
        let size_class = match f[3] {
            "small" => SizeClass::Small,
            "large" => SizeClass::Large,
            other => return Err(parse_err(lineno, format!("bad size class `{other}`"))),
        };
        let id = f[0].to_string();
        let slot = match order.iter().rposition(|o| *o == id) {
            Some(s) => s,
            None => {
                order.push(id.clone());
                anns.push(Vec::new());
                order.len() - 1
            }
        };
        anns[slot].push(Annotation {
            image_id: id,
            category,
            bbox,
            size_class,
        });
    }

    let samples = order
        .into_par_iter()
        .zip(anns)
        .map(|(id, annotations)| {
            let image = RgbImage::read_ppm(&dir.join(&id))?;
            for a in &annotations {
                let b = a.bbox;
                if b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > image.width as f64 || b.ymax > image.height as f64 {
                    return Err(Error::OutOfRange(format!("{id}: box {b:?} outside the image")));
                }
            }
            Ok(Sample { id, image, annotations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { categories, samples })
}

/// Raw bytes of every file under `dir`, keyed by relative path; used to
/// compare generated trees.
pub fn tree_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let mut buf = Vec::new();
                fs::File::open(&p)
                    .and_then(|mut f| f.read_to_end(&mut buf))
                    .map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).expect("under root").to_path_buf(), buf));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Greyscale PGM (P5) writer.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height, "pgm: size mismatch");
    let mut f = Vec::with_capacity(data.len() + 20);
    write!(f, "P5\n{width} {height}\n255\n").expect("write to vec");
    f.extend_from_slice(data);
    crate::checkpoint::write_atomic(path, &f)
}
