use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "tokenizer": {"steps": 50},
    "policy": {"sft": {"steps": 5}},
    "driver": {"total_steps": 2, "log_every": 1, "record_wall_time": false},
    "diagnostics": {"probe_every": 1, "probe_samples": 64, "eval_samples": 32, "baseline": false}
}"#;

fn coevo(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coevo"));
    cmd.args(args).env_remove("COEVO_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn invalid_config_is_one_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"stage1":{"group_size":1}}"#);
    let out = coevo(&["train", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("G ≥ 2"));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = coevo(&["no-such-command"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn malformed_seed_variable_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(
        &["tokenizer-pretrain", "--out", dir.path().to_str().unwrap()],
        &[("COEVO_SEED", "seven")],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("COEVO_SEED"));
}

#[test]
fn export_writes_images_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("data");
    let v = stdout_json(&coevo(&["export-dataset", "--out", target.to_str().unwrap(), "--n", "3"], &[]));
    assert_eq!(v["images"], 3);
    assert_eq!(std::fs::metadata(target.join("00002.f32")).unwrap().len(), 16 * 16 * 3 * 4);
    let index: Value = serde_json::from_slice(&std::fs::read(target.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["items"].as_array().unwrap().len(), 3);
}

#[test]
fn train_then_probe_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let v = stdout_json(&coevo(
        &["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--mode", "full"],
        &[("COEVO_SEED", "7")],
    ));
    let effective: Value =
        serde_json::from_slice(&std::fs::read(run.join("config.effective.json")).unwrap()).unwrap();
    assert_eq!(effective["seeds"]["run"], 7);
    assert_eq!(effective["driver"]["mode"], "full");
    let final_ckpt = v["final_checkpoint"].as_str().unwrap().to_string();

    let p = stdout_json(&coevo(
        &["probe", "--config", &cfg, "--out", run.to_str().unwrap(), "--checkpoint", &final_ckpt],
        &[("COEVO_SEED", "7")],
    ));
    assert_eq!(p["step"], 2);
    assert!(p["kl_nats"].as_f64().unwrap() >= 0.0);
    assert!(p.get("warning_config_hash_mismatch").is_none());

    // A different seed no longer matches the checkpoint's config hash.
    let p = stdout_json(&coevo(
        &["probe", "--config", &cfg, "--checkpoint", &final_ckpt],
        &[("COEVO_SEED", "8")],
    ));
    assert_eq!(p["warning_config_hash_mismatch"], 1.0);

    let plots = dir.path().join("plots");
    let metrics = format!("full={}", run.join("metrics.jsonl").display());
    let v = stdout_json(&coevo(&["plot", "--run", &metrics, "--out", plots.to_str().unwrap()], &[]));
    assert!(!v["files"].as_array().unwrap().is_empty());
    assert!(plots.join("shift_kl.svg").exists());
}
