mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use candle_core::DType;
use common::{benchmark_like_tracks, write_cvat_fixture};
use mgnet::checkpoint::Checkpoint;
use mgnet::model::{Mgnet, ModelConfig};

fn mgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgnet"))
        .args(args)
        .env_remove("MGNET_DATA_DIR")
        .output()
        .expect("spawn mgnet")
}

fn ok(args: &[&str]) -> Output {
    let out = mgnet(args);
    assert!(
        out.status.success(),
        "mgnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn single_error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).trim().to_string();
    assert_eq!(err.lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "), "stderr: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, seed: &str) {
    ok(&["synth", "--out", s(out), "--tracks", "60", "--length", "75", "--seed", seed]);
}

const TINY: [&str; 10] = [
    "--hidden-dim", "16", "--latent-dim", "4", "--goals", "3", "--train-stride", "10", "--eval-stride", "10",
];

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    synth(&a, "3");
    synth(&b, "3");
    synth(&c, "4");
    let read = |d: &Path| std::fs::read(d.join("tracks.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(std::fs::read(a.join("split.json")).unwrap(), std::fs::read(b.join("split.json")).unwrap());
    assert!(a.join("run_config.toml").is_file());
}

#[test]
fn ingest_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_cvat_fixture(&raw, &benchmark_like_tracks(4, 3, 40, 1));
    let out = dir.path().join("canon");
    let args = ["ingest", "--source", s(&raw), "--format", "jaad-xml", "--out", s(&out)];
    let stdout = String::from_utf8(ok(&args).stdout).unwrap();
    assert!(stdout.starts_with("12 tracks written"), "{stdout}");
    let first = std::fs::read_to_string(out.join("tracks.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 12 * 40);
    assert!(out.join("run_config.toml").is_file());
    ok(&args);
    assert_eq!(std::fs::read_to_string(out.join("tracks.jsonl")).unwrap(), first);
}

#[test]
fn ingest_of_empty_directory_fails_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = mgnet(&["ingest", "--source", s(&empty), "--format", "jaad-xml", "--out", s(&dir.path().join("o"))]);
    single_error_line(&out);
}

#[test]
fn train_without_dataset_fails_before_building_model() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = mgnet(&["train", "--out", s(&out_dir), "--epochs", "1"]);
    let err = single_error_line(&out);
    assert!(err.contains("MGNET_DATA_DIR"), "{err}");
    assert!(!out_dir.join("model.safetensors").exists());

    let missing = dir.path().join("nowhere");
    let out = mgnet(&["train", "--data", s(&missing), "--out", s(&out_dir), "--epochs", "1"]);
    single_error_line(&out);
    assert!(!out_dir.join("model.safetensors").exists());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "5");

    let run = dir.path().join("run");
    let start = Instant::now();
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "1", "--seed", "2"];
    args.extend(TINY);
    ok(&args);
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["model.safetensors", "train_log.csv", "run_config.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let eval = dir.path().join("eval");
    let ckpt = run.join("model.safetensors");
    ok(&["eval", "--data", s(&data), "--out", s(&eval), "--checkpoint", s(&ckpt), "--predictions"]);
    assert!(eval.join("run_config.toml").is_file());
    let csv = std::fs::read_to_string(eval.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dataset,variant,k,mse_0.5,mse_1.0,mse_1.5,c_mse,cf_mse,seeds"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        for v in &cells[3..8] {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }
}

#[test]
fn eval_of_untrained_checkpoint_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "6");
    let ckpt = dir.path().join("untrained.safetensors");
    let model = Mgnet::new(ModelConfig::default(), DType::F32, 11).unwrap();
    Checkpoint::from_model(&model, 0, None, None, None).unwrap().save(&ckpt).unwrap();
    let eval = dir.path().join("eval");
    ok(&[
        "eval",
        "--data",
        s(&data),
        "--out",
        s(&eval),
        "--checkpoint",
        s(&ckpt),
    ]);
    let report = std::fs::read_to_string(eval.join("report.json")).unwrap();
    assert!(!report.contains("NaN") && !report.contains("null"), "{report}");
}

#[test]
fn unknown_checkpoint_fails_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "7");
    let out = mgnet(&[
        "eval",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("e")),
        "--checkpoint",
        s(&dir.path().join("missing.safetensors")),
    ]);
    single_error_line(&out);
}
