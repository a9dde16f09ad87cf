use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use ffssd_core::bench::bench_median;
use ffssd_core::checkpoint::{write_atomic, Checkpoint};
use ffssd_core::config::RunConfig;
use ffssd_core::data::{gen_split, load_split, RgbImage};
use ffssd_core::detector::{Detector, Tap};
use ffssd_core::erf::{erf_probe, probe_image};
use ffssd_core::eval::{evaluate_detections, format_detections, parse_detections, predict, ImageDetection};
use ffssd_core::train::{format_loss_log, train};

#[derive(Parser)]
#[command(name = "ffssd", version, about = "Feature-fused single-shot detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
    },
    /// Train a model and write a checkpoint plus `<out>.cfg` and `<out>.log`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fine_tune_from: Option<PathBuf>,
        /// Overrides `[train] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[train] iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score a checkpoint (or a detections file) against a dataset split.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate this detections file instead of running a model.
        #[arg(long, conflicts_with = "ckpt")]
        detections: Option<PathBuf>,
        /// Also write the model's detections here.
        #[arg(long)]
        detections_out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print detections for one PPM image.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Effective receptive field of one tap activation.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tap: Tap,
        /// Feature-map position as `Y,X`; defaults to the centre.
        #[arg(long, value_parser = parse_pos)]
        pos: Option<(usize, usize)>,
        /// Split whose mean image forms the probe; defaults to freshly
        /// generated scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the heatmap as a PGM.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Inference throughput and closed-form cost, one line per config.
    Bench {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

/// Exit status 2 for inputs that do not exist, 1 for everything else.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        Failure { code: 1, err }
    }
}

fn parse_pos(s: &str) -> std::result::Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected Y,X")?;
    Ok((
        y.trim().parse().map_err(|_| format!("bad row `{y}`"))?,
        x.trim().parse().map_err(|_| format!("bad column `{x}`"))?,
    ))
}

fn require_dir(dir: &Path) -> std::result::Result<(), Failure> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            err: anyhow!("data directory {} does not exist", dir.display()),
        })
    }
}

fn require_file(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            err: anyhow!("{} does not exist", path.display()),
        })
    }
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Configuration a checkpoint was trained with: `--config` if given, else
/// the `.cfg` written next to it.
fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    require_file(ckpt)?;
    let side = sidecar(ckpt, ".cfg");
    match explicit {
        Some(p) => Ok(load_config(Some(p))?),
        None if side.is_file() => Ok(RunConfig::load(&side).map_err(anyhow::Error::from)?),
        None => Err(anyhow!("no --config given and {} not found", side.display()).into()),
    }
}

fn load_model(ckpt: &Path, cfg: &RunConfig) -> std::result::Result<Detector<f32>, Failure> {
    require_file(ckpt)?;
    let mut model = Detector::<f32>::new(cfg.model.clone(), cfg.train.seed).map_err(anyhow::Error::from)?;
    let report = Checkpoint::load(ckpt)
        .and_then(|c| c.load_into(&mut model))
        .map_err(anyhow::Error::from)?;
    if !report.fresh.is_empty() {
        return Err(anyhow!(
            "{} lacks {} parameters of the configured model (first: {})",
            ckpt.display(),
            report.fresh.len(),
            report.fresh[0]
        )
        .into());
    }
    Ok(model)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            seed,
            count,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = gen_split(&out, seed, &cfg.data, count).map_err(anyhow::Error::from)?;
            let (n, small) = (data.num_objects(), data.num_small());
            println!("images: {}", data.samples.len());
            println!("objects: {n}");
            let share = if n == 0 { 0.0 } else { 100.0 * small as f64 / n as f64 };
            println!("small objects: {share:.1}% ({small}/{n})");
        }
        Cmd::Train {
            config,
            data,
            out,
            fine_tune_from,
            seed,
            iterations,
        } => {
            require_dir(&data)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(i) = iterations {
                cfg.train.iterations = i;
            }
            if let Some(p) = fine_tune_from {
                require_file(&p)?;
                cfg.train.fine_tune_from = Some(p);
            }
            let dataset = load_split(&data).map_err(anyhow::Error::from)?;
            let outcome = train(&cfg.model, &cfg.train, &dataset, |i, l| println!("{i}\t{l:.6}"))
                .with_context(|| format!("training into {}", out.display()))?;
            if let Some(r) = &outcome.fine_tune {
                println!(
                    "fine-tune: loaded {} parameters, initialised {} new",
                    r.loaded.len(),
                    r.fresh.len()
                );
            }
            Checkpoint::from_model(&outcome.model)
                .save(&out)
                .map_err(anyhow::Error::from)?;
            write_atomic(&sidecar(&out, ".cfg"), cfg.render().as_bytes()).map_err(anyhow::Error::from)?;
            write_atomic(&sidecar(&out, ".log"), format_loss_log(&outcome.log).as_bytes())
                .map_err(anyhow::Error::from)?;
            println!("checkpoint: {}", out.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            detections,
            detections_out,
            config,
        } => {
            require_dir(&data)?;
            let dataset = load_split(&data).map_err(anyhow::Error::from)?;
            let dets: Vec<ImageDetection> = match (&ckpt, &detections) {
                (_, Some(path)) => {
                    require_file(path)?;
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    parse_detections(&text, &dataset.categories, path).map_err(anyhow::Error::from)?
                }
                (Some(ckpt), None) => {
                    let cfg = checkpoint_config(ckpt, config.as_deref())?;
                    let model = load_model(ckpt, &cfg)?;
                    predict(&model, &dataset, &cfg.eval).map_err(anyhow::Error::from)?
                }
                (None, None) => unreachable!("clap requires one of --ckpt / --detections"),
            };
            if let Some(p) = detections_out {
                write_atomic(&p, format_detections(&dets, &dataset.categories).as_bytes())
                    .map_err(anyhow::Error::from)?;
            }
            let report = evaluate_detections(&dets, &dataset).map_err(anyhow::Error::from)?;
            print!("{report}");
        }
        Cmd::Detect { ckpt, image, config } => {
            require_file(&image)?;
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let model = load_model(&ckpt, &cfg)?;
            let img = RgbImage::read_ppm(&image).map_err(anyhow::Error::from)?;
            let s = cfg.model.input_size;
            if img.width != s || img.height != s {
                return Err(anyhow!("{} is {}x{}, the model takes {s}x{s}", image.display(), img.width, img.height).into());
            }
            let id = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let dets = model.detect(&img.to_tensor(), &cfg.eval).map_err(anyhow::Error::from)?;
            let dets: Vec<ImageDetection> = dets[0]
                .iter()
                .map(|d| ImageDetection {
                    image_id: id.clone(),
                    category: d.category,
                    score: d.score,
                    bbox: d.bbox.scale(s as f64, s as f64),
                })
                .collect();
            let names: Vec<String> = ffssd_core::data::CATEGORY_NAMES.iter().map(|c| c.to_string()).collect();
            print!("{}", format_detections(&dets, &names));
        }
        Cmd::Erf {
            ckpt,
            tap,
            pos,
            data,
            heatmap,
            config,
        } => {
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let mut model = load_model(&ckpt, &cfg)?;
            let probe_set = match &data {
                Some(dir) => {
                    require_dir(dir)?;
                    load_split(dir).map_err(anyhow::Error::from)?
                }
                None => ffssd_core::data::gen_dataset(0, &cfg.data, 64).map_err(anyhow::Error::from)?,
            };
            let img = probe_image(&probe_set, cfg.model.input_size);
            let (y, x) = pos.unwrap_or_else(|| ffssd_core::erf::center(&cfg.model, tap));
            let map = erf_probe(&mut model, &img, tap, y, x).map_err(anyhow::Error::from)?;
            if let Some(p) = heatmap {
                map.write_pgm(&p).map_err(anyhow::Error::from)?;
            }
            println!("tap\t{tap}");
            println!("pos\t{y},{x}");
            println!("area\t{}", map.area);
        }
        Cmd::Bench {
            config,
            images,
            warmup,
            runs,
        } => {
            for path in &config {
                let cfg = load_config(Some(path))?;
                let r = bench_median(&cfg.model, images, warmup, runs).map_err(anyhow::Error::from)?;
                let f = &cfg.model.fusion;
                let label = if cfg.model.fused() {
                    format!("{}@{}", f.mode, f.branch_kernels)
                } else {
                    f.mode.to_string()
                };
                println!(
                    "{label}\tparams {}\tmult_adds {}\timages_per_sec {:.2}",
                    r.params, r.mult_adds, r.images_per_sec
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FFSD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
