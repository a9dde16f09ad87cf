use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ffssd_core::data::{load_split, tree_bytes};

fn ffssd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffssd"))
        .args(args)
        .env("FFSD_THREADS", "1")
        .output()
        .expect("spawn ffssd")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
[model]
stage_channels = 4, 4, 8, 8, 8
fc6_channels = 8
extra_channels = 8

[fusion]
branch_kernels = 8

[train]
batch = 2
iterations = 4
milestones = 0:0.01, 2:0.001
";

fn value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no `{key}` line in\n{out}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_data_is_deterministic_and_reports_small_share() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = stdout(&ffssd(&["gen-data", "--out", p(&a), "--seed", "5", "--count", "30"]));
    stdout(&ffssd(&["gen-data", "--out", p(&b), "--seed", "5", "--count", "30"]));
    assert_eq!(tree_bytes(&a).unwrap(), tree_bytes(&b).unwrap());

    let data = load_split(&a).unwrap();
    let line = out.lines().find(|l| l.starts_with("small objects: ")).unwrap();
    let expect = format!(
        "small objects: {:.1}% ({}/{})",
        100.0 * data.num_small() as f64 / data.num_objects() as f64,
        data.num_small(),
        data.num_objects()
    );
    assert_eq!(line, expect);
}

#[test]
fn gen_data_zero_count_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    stdout(&ffssd(&["gen-data", "--out", p(&out), "--count", "0"]));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn bad_config_names_section_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[data]\np_small = 0.5\nwobble = 1\n").unwrap();
    let o = ffssd(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d")), "--count", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.cfg:3") && err.contains("[data] unknown key `wobble`"), "{err}");
}

#[test]
fn missing_data_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = ffssd(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m.ffsd"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(p(&missing)));
    assert!(!dir.path().join("m.ffsd").exists());
}

#[test]
fn train_fine_tune_eval_detect_erf() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let fused_cfg = d.join("fused.cfg");
    fs::write(&fused_cfg, TINY.replace("branch_kernels = 8", "mode = eltsum\nbranch_kernels = 8")).unwrap();
    let data = d.join("data");
    stdout(&ffssd(&["gen-data", "--config", p(&cfg), "--out", p(&data), "--seed", "1", "--count", "6"]));

    let (m1, m2) = (d.join("m1.ffsd"), d.join("m2.ffsd"));
    let log = stdout(&ffssd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&m1), "--seed", "3"]));
    stdout(&ffssd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&m2), "--seed", "3"]));
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert!(log.lines().next().unwrap().starts_with("0\t"));
    assert_eq!(fs::read_to_string(d.join("m1.ffsd.log")).unwrap().lines().count(), 2);

    let fused = d.join("fused.ffsd");
    let ft = stdout(&ffssd(&[
        "train",
        "--config",
        p(&fused_cfg),
        "--data",
        p(&data),
        "--out",
        p(&fused),
        "--fine-tune-from",
        p(&m1),
    ]));
    let line = ft.lines().find(|l| l.starts_with("fine-tune: ")).unwrap();
    assert!(line.contains("loaded") && line.contains("initialised"), "{line}");

    let dets = d.join("dets.txt");
    let ev = stdout(&ffssd(&["eval", "--ckpt", p(&fused), "--data", p(&data), "--detections-out", p(&dets)]));
    let map = value(&ev, "mAP");
    let small = value(&ev, "mAP_small");
    assert!((0.0..=1.0).contains(&map) && (0.0..=1.0).contains(&small));
    let again = stdout(&ffssd(&["eval", "--detections", p(&dets), "--data", p(&data)]));
    assert_eq!(ev, again);

    let img = data.join("images").join("00000.ppm");
    let det = stdout(&ffssd(&["detect", "--ckpt", p(&fused), "--image", p(&img)]));
    for l in det.lines() {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 4);
        assert_eq!(f[0], "00000");
        assert_eq!(f[3].split(' ').count(), 4);
    }

    let erf = |tap: &str| {
        value(&stdout(&ffssd(&["erf", "--ckpt", p(&m1), "--tap", tap, "--heatmap", p(&d.join(format!("{tap}.pgm")))])), "area")
    };
    let (a3, a5) = (erf("conv3a"), erf("conv5a"));
    assert!(a5 >= a3, "{a3} {a5}");
    let pgm = fs::read(d.join("conv5a.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n96 96\n255\n"));

    let o = ffssd(&["erf", "--ckpt", p(&m1), "--tap", "conv5a", "--pos", "40,0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ffssd(&["eval", "--ckpt", p(&d.join("absent.ffsd")), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_prints_one_line_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (name, fusion) in [("none", ""), ("concat", "mode = concat\n"), ("eltsum", "mode = eltsum\n")] {
        let path = dir.path().join(format!("{name}.cfg"));
        fs::write(&path, TINY.replace("[fusion]\n", &format!("[fusion]\n{fusion}"))).unwrap();
        paths.push(path);
    }
    let mut args = vec!["bench", "--images", "2", "--warmup", "0", "--runs", "1", "--config"];
    args.extend(paths.iter().map(|q| p(q)));
    let out = stdout(&ffssd(&args));
    let labels: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["none", "concat@8", "eltsum@8"]);
    assert!(out.lines().all(|l| l.contains("params ") && l.contains("mult_adds ") && l.contains("images_per_sec ")));
}
