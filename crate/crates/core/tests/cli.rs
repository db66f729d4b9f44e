use std::path::Path;
use std::process::{Command, Output};

use deinforeg::harness::read_metrics;

const TINY: &str = r#"{
    "dataset": {"kind": "blobs", "classes": 3, "per_class": 30, "dim": 4, "separation": 3.0},
    "epochs": 2, "batch_size": 16, "seeds": [0, 1],
    "model": {"depth": 2, "width": 8, "activation": "relu", "projector": {"kind": "identity"}}
}"#;

fn deinforeg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deinforeg")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pipeline_sim_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = deinforeg(&["pipeline-sim", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["metrics.jsonl", "summary.csv", "gantt.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("sim-bp") && stdout.contains("17.000000"));
    assert!(stdout.contains("sim-deinforeg") && stdout.contains("8.000000"));
}

#[test]
fn train_respects_seed_and_workers_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let res = deinforeg(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7", "--workers", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let records = read_metrics(out.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.seed == 7));
    assert!(!out.join("gantt.csv").exists());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().next().unwrap().starts_with("run,metric,mean,std,n"));
}

#[test]
fn gradcheck_runs_from_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let res = deinforeg(&["gradcheck", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

fn assert_one_line_failure(res: &Output) {
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error:"), "{stderr}");
}

#[test]
fn missing_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let res = deinforeg(&["train", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_one_line_failure(&res);
}

#[test]
fn unknown_config_field_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"epochz": 3}"#);
    assert_one_line_failure(&deinforeg(&["train", "--config", &cfg]));
}

#[test]
fn invalid_values_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_one_line_failure(&deinforeg(&["train", "--config", &cfg, "--workers", "0", "--out", out.to_str().unwrap()]));
    let cfg = write_config(dir.path(), r#"{"batch_size": 0}"#);
    assert_one_line_failure(&deinforeg(&["train", "--config", &cfg]));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let res = deinforeg(&["bogus"]);
    assert!(!res.status.success());
}
