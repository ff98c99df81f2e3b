use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deblock::arch::{build_l4, Network, Objective};
use deblock::image::{load_gray, save_gray, GrayImage};
use deblock::save_model;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deblock"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn natural(name: &str) -> GrayImage {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/natural");
    load_gray(dir.join(format!("{name}.pgm"))).unwrap()
}

/// Three small crops of natural images in `dir`.
fn write_images(dir: &Path, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for (i, name) in ["camera", "coins", "moon"].iter().enumerate() {
        let img = natural(name).crop(10 * i, 20, size, size + 7).unwrap();
        save_gray(&img, dir.join(format!("{name}.pgm"))).unwrap();
    }
}

fn dir_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = match fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().into_string().unwrap()).collect(),
        Err(_) => Vec::new(),
    };
    v.sort();
    v
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["restore", "--bogus"])), 1);
    assert_eq!(code(&run(&["degrade", "--quality", "abc", "--in", "a", "--out", "b"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn out_of_range_quality_is_rejected() {
    let t = TempDir::new().unwrap();
    write_images(&t.path().join("clean"), 24);
    let o = run(&["degrade", "--quality", "0", "--in", s(&t.path().join("clean")), "--out", s(&t.path().join("q"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_model_writes_nothing() {
    let t = TempDir::new().unwrap();
    write_images(&t.path().join("in"), 24);
    let model = t.path().join("bad.model");
    fs::write(&model, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = t.path().join("out");
    let o = run(&["restore", "--model", s(&model), "--in", s(&t.path().join("in")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(dir_files(&out).is_empty());
}

#[test]
fn missing_input_is_an_io_error() {
    let t = TempDir::new().unwrap();
    let o = run(&["spp", "--quality", "10", "--in", s(&t.path().join("nope")), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_residual_model_restores_inputs_exactly() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    write_images(&input, 30);
    let model = t.path().join("zero.model");
    save_model(&Network::<f32>::zeros(build_l4(Objective::Residual)).unwrap(), &model).unwrap();
    let out = t.path().join("out");
    let o = run(&["restore", "--model", s(&model), "--in", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(dir_files(&out), dir_files(&input));
    for f in dir_files(&input) {
        assert_eq!(fs::read(input.join(&f)).unwrap(), fs::read(out.join(&f)).unwrap(), "{f}");
    }
}

#[test]
fn too_small_image_fails_restore() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    fs::create_dir_all(&input).unwrap();
    save_gray(&natural("camera").crop(0, 0, 5, 40).unwrap(), input.join("thin.pgm")).unwrap();
    let model = t.path().join("m.model");
    save_model(&Network::<f32>::init(build_l4(Objective::Residual), 1).unwrap(), &model).unwrap();
    let o = run(&["restore", "--model", s(&model), "--in", s(&input), "--out", s(&t.path().join("out"))]);
    assert_ne!(code(&o), 0);
}

#[test]
fn degrade_writes_images_and_manifest_idempotently() {
    let t = TempDir::new().unwrap();
    let clean = t.path().join("clean");
    write_images(&clean, 24);
    let (out, manifest) = (t.path().join("q10"), t.path().join("m.tsv"));
    let args = ["degrade", "--quality", "10", "--in", s(&clean), "--out", s(&out), "--manifest", s(&manifest)];
    assert_eq!(code(&run(&args)), 0);
    let first: Vec<Vec<u8>> = dir_files(&out).iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(first.len(), 3);
    let text = fs::read_to_string(&manifest).unwrap();
    let entries: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|l| l.ends_with("\t10")));

    assert_eq!(code(&run(&args)), 0);
    let second: Vec<Vec<u8>> = dir_files(&out).iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn evaluate_sentinels() {
    let t = TempDir::new().unwrap();
    let clean = t.path().join("clean");
    write_images(&clean, 24);
    let q = t.path().join("q");
    assert_eq!(code(&run(&["degrade", "--quality", "10", "--in", s(&clean), "--out", s(&q)])), 0);

    let report = t.path().join("perfect.csv");
    let o = run(&["evaluate", "--restored", s(&clean), "--distorted", s(&q), "--reference", s(&clean), "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&fs::read_to_string(&report).unwrap());
    assert_eq!(rows[0], ["image", "psnr", "psnr_b", "ssim", "ipsnr"]);
    assert_eq!(rows.len(), 5);
    for r in &rows[1..4] {
        assert_eq!((r[1].as_str(), r[3].as_str()), ("inf", "1.000000"));
    }

    let report = t.path().join("same.csv");
    let o = run(&["evaluate", "--restored", s(&q), "--distorted", s(&q), "--reference", s(&clean), "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&fs::read_to_string(&report).unwrap());
    for r in &rows[1..] {
        assert_eq!(r[4], "0.000000");
    }
    assert_eq!(rows.last().unwrap()[0], "mean");
}

#[test]
fn evaluate_needs_every_counterpart() {
    let t = TempDir::new().unwrap();
    let clean = t.path().join("clean");
    write_images(&clean, 24);
    let partial = t.path().join("partial");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(clean.join("camera.pgm"), partial.join("camera.pgm")).unwrap();
    let o = run(&["evaluate", "--restored", s(&clean), "--distorted", s(&partial), "--reference", s(&clean)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn spp_keeps_dimensions_and_rejects_odd_shift_counts() {
    let t = TempDir::new().unwrap();
    let clean = t.path().join("clean");
    write_images(&clean, 24);
    let out = t.path().join("spp");
    assert_eq!(code(&run(&["spp", "--quality", "10", "--shifts", "4", "--in", s(&clean), "--out", s(&out)])), 0);
    for f in dir_files(&clean) {
        assert_eq!(load_gray(out.join(&f)).unwrap().dims(), load_gray(clean.join(&f)).unwrap().dims());
    }
    let o = run(&["spp", "--quality", "10", "--shifts", "5", "--in", s(&clean), "--out", s(&t.path().join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn export_filters_writes_a_grid() {
    let t = TempDir::new().unwrap();
    let model = t.path().join("m.model");
    save_model(&Network::<f32>::init(build_l4(Objective::Direct), 3).unwrap(), &model).unwrap();
    let png = t.path().join("filters.png");
    assert_eq!(code(&run(&["export-filters", "--model", s(&model), "--out", s(&png)])), 0);
    assert_eq!(load_gray(&png).unwrap().dims(), (85, 85));
}

fn tiny_training_set(t: &TempDir) -> PathBuf {
    let clean = t.path().join("clean");
    write_images(&clean, 40);
    let manifest = t.path().join("train.tsv");
    let o = run(&[
        "degrade", "--quality", "10", "--in", s(&clean), "--out", s(&t.path().join("q10")), "--manifest", s(&manifest),
    ]);
    assert_eq!(code(&o), 0);
    manifest
}

#[test]
fn train_writes_model_log_and_checkpoints() {
    let t = TempDir::new().unwrap();
    let manifest = tiny_training_set(&t);
    let (model, log, ckpt) = (t.path().join("m.model"), t.path().join("log.csv"), t.path().join("ckpt"));
    let o = run(&[
        "train", "--manifest", s(&manifest), "--val-manifest", s(&manifest), "--out", s(&model), "--log", s(&log),
        "--checkpoint-dir", s(&ckpt), "--iterations", "4", "--batch-size", "2", "--patch-size", "24",
        "--checkpoint-period", "2", "--log-period", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("iteration,lr,loss,val_ipsnr\n"));
    assert_eq!(log.lines().count(), 5);
    assert_eq!(
        dir_files(&ckpt),
        ["ckpt_0000002.json", "ckpt_0000002.model", "ckpt_0000004.json", "ckpt_0000004.model"]
    );
    assert_eq!(fs::read(&model).unwrap(), fs::read(ckpt.join("ckpt_0000004.model")).unwrap());

    let out = t.path().join("restored");
    let o = run(&["restore", "--model", s(&model), "--in", s(&t.path().join("q10")), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_files(&out).len(), 3);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let t = TempDir::new().unwrap();
    let manifest = tiny_training_set(&t);
    let common = ["--batch-size", "2", "--patch-size", "24", "--checkpoint-period", "2"];
    let full = t.path().join("full.model");
    let ckpt = t.path().join("ckpt");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&full), "--iterations", "4"];
    args.extend(["--checkpoint-dir", s(&ckpt)]);
    args.extend(common);
    assert_eq!(code(&run(&args)), 0);

    let resumed = t.path().join("resumed.model");
    let from = ckpt.join("ckpt_0000002.model");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&resumed), "--iterations", "4"];
    args.extend(["--resume", s(&from)]);
    args.extend(common);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn divergence_exits_3() {
    let t = TempDir::new().unwrap();
    let manifest = tiny_training_set(&t);
    let o = run(&[
        "train", "--manifest", s(&manifest), "--out", s(&t.path().join("m.model")), "--iterations", "50",
        "--batch-size", "2", "--patch-size", "24", "--lr", "1e30",
    ]);
    assert_eq!(code(&o), 3);
    assert!(!t.path().join("m.model").exists());
}

#[test]
fn experiment_drivers_write_csv() {
    let t = TempDir::new().unwrap();
    let clean = t.path().join("clean");
    write_images(&clean, 40);
    let model = t.path().join("m.model");
    save_model(&Network::<f32>::zeros(build_l4(Objective::Residual)).unwrap(), &model).unwrap();
    let matrix = t.path().join("matrix.csv");
    let spec = format!("zero={}", s(&model));
    let o = run(&["quality-matrix", "--model", &spec, "--clean", s(&clean), "--qualities", "10,20", "--out", s(&matrix)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&fs::read_to_string(&matrix).unwrap());
    assert_eq!(rows[0], ["model", "q10", "q20"]);
    assert_eq!(rows[1], ["zero", "0.000000", "0.000000"]);

    let sizes = t.path().join("sizes.csv");
    let o = run(&[
        "dataset-size", "--sizes", "1,2", "--train-dir", s(&clean), "--test-dir", s(&clean), "--iterations", "2",
        "--batch-size", "2", "--patch-size", "24", "--out", s(&sizes),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&fs::read_to_string(&sizes).unwrap());
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "1");
    assert_eq!(rows[2][0], "2");
}

#[test]
fn thread_count_must_be_positive() {
    let t = TempDir::new().unwrap();
    write_images(&t.path().join("clean"), 24);
    let o = bin()
        .env("DEBLOCK_THREADS", "0")
        .args(["degrade", "--quality", "10", "--in", s(&t.path().join("clean")), "--out", s(&t.path().join("q"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
