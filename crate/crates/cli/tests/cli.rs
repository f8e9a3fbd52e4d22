use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = r#"{
  "mode": "scoregan",
  "train": {
    "batch_size": 4,
    "total_iterations": 6,
    "halve_at_iteration": 4,
    "n_critic": 2,
    "seed": 3
  },
  "data": { "classes": 2, "train_size": 256, "held_out_size": 64 },
  "eval": { "n_splits": 2, "split_size": 16, "eval_interval": 3, "fid_samples": 32 },
  "evaluators": { "pretrain": { "iterations": 20, "batch_size": 8, "min_accuracy": 0.0 } },
  "checkpoint_interval": 3
}"#;

fn scoregan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scoregan")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Run {
    _dir: TempDir,
    config: PathBuf,
    out: PathBuf,
}

/// One tiny training run shared by the tests that only read from it.
fn trained() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let out = dir.path().join("run");
        let o = scoregan(&["train", "--config", path(&config), "--out", path(&out)]);
        assert!(o.status.success(), "train failed: {}", stderr(&o));
        Run { _dir: dir, config, out }
    })
}

#[test]
fn train_writes_the_run_directory() {
    let r = trained();
    for f in ["config.json", "run.json", "metrics.csv", "evaluators/train/manifest.json", "evaluators/metric/blob.bin"] {
        assert!(r.out.join(f).is_file(), "missing {f}");
    }
    for it in ["iter-000003", "iter-000006"] {
        assert!(r.out.join("checkpoints").join(it).join("manifest.json").is_file());
    }
    let csv = fs::read_to_string(r.out.join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,loss_d,loss_g,loss_c,gamma,toy_is_mean,toy_is_std,toy_fid");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("3,") && lines[2].starts_with("6,"));
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.out.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["mode"], "scoregan");
    assert_ne!(info["train_evaluator_checksum"], info["metric_evaluator_checksum"]);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("resumed");
    let ck = r.out.join("checkpoints/iter-000003");
    let o = scoregan(&["train", "--config", path(&r.config), "--out", path(&out), "--resume", path(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(r.out.join("metrics.csv")).unwrap());
    for f in ["manifest.json", "blob.bin"] {
        let a = fs::read(out.join("checkpoints/iter-000006").join(f)).unwrap();
        let b = fs::read(r.out.join("checkpoints/iter-000006").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs after resume");
    }
}

#[test]
fn eval_is_deterministic_csv() {
    let r = trained();
    let ck = r.out.join("checkpoints/iter-000006");
    let a = scoregan(&["eval", "--checkpoint", path(&ck)]);
    let b = scoregan(&["eval", "--checkpoint", path(&ck)]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "metric,value,std");
    assert!(lines[1].starts_with("toy_is,") && lines[2].starts_with("toy_fid,"));
    // the last evaluation row of training used the same samples
    let csv = fs::read_to_string(r.out.join("metrics.csv")).unwrap();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert_eq!(lines[1], format!("toy_is,{},{}", last[5], last[6]));
    assert_eq!(lines[2], format!("toy_fid,{},", last[7]));
}

#[test]
fn generate_writes_a_ppm_grid() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.ppm");
    let ck = r.out.join("checkpoints/iter-000006");
    let o = scoregan(&["generate", "--checkpoint", path(&ck), "--per-class", "3", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&out).unwrap();
    let header = b"P6\n32 48\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 32 * 48 * 3);
}

#[test]
fn corrupted_checkpoint_is_reported_by_entry() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    fs::create_dir(&ck).unwrap();
    for f in ["manifest.json", "blob.bin"] {
        fs::copy(r.out.join("checkpoints/iter-000006").join(f), ck.join(f)).unwrap();
    }
    let mut blob = fs::read(ck.join("blob.bin")).unwrap();
    blob[0] ^= 0xff;
    fs::write(ck.join("blob.bin"), blob).unwrap();
    let o = scoregan(&["generate", "--checkpoint", path(&ck), "--out", path(&dir.path().join("x.ppm"))]);
    assert_eq!(o.status.code(), Some(4));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ck.join("manifest.json")).unwrap()).unwrap();
    let first = manifest["entries"][0]["name"].as_str().unwrap().to_string();
    assert!(stderr(&o).contains(&first), "stderr: {}", stderr(&o));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    for text in [r#"{"train": {"lr": 1}}"#, r#"{"mode": "scoregan", "train": {"delta": 0}}"#, r#"{"networks": "huge"}"#] {
        fs::write(&bad, text).unwrap();
        let o = scoregan(&["train", "--config", path(&bad), "--out", path(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
    }
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = scoregan(&["train", "--config", path(&dir.path().join("nope.json")), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    let o = scoregan(&["generate", "--checkpoint", path(&dir.path().join("nope")), "--out", path(&dir.path().join("x.ppm"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn pretrain_evaluator_saves_a_loadable_checkpoint() {
    let r = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ev");
    let o = scoregan(&["pretrain-evaluator", "--config", path(&r.config), "--seed", "9", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "evaluator");
    let ck = r.out.join("checkpoints/iter-000006");
    let o = scoregan(&["eval", "--checkpoint", path(&ck), "--evaluator", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = scoregan(&["gradcheck", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["cases"].as_array().unwrap().len() > 50);
}
