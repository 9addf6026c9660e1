//! End-to-end checks of the `fedsoda` binary: exit codes, CSV outputs,
//! config validation surfaces.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsoda"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedsoda_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Tiny two-client config so CLI tests stay fast.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let body = format!(
        r#"{{
  "method": "fedsoda",
  "seed": 7,
  "rounds": 2,
  "local_epochs": 1,
  "num_clients": 2,
  "data": [
    {{"client_id": 0, "n_samples": 5, "image_h": 12, "image_w": 12,
      "blob_radius": [2.0, 4.0], "blobs_per_image": [1, 2],
      "fg_intensity": 0.8, "bg_intensity": 0.2, "noise_std": 0.05, "seed": 0}},
    {{"client_id": 1, "n_samples": 5, "image_h": 12, "image_w": 12,
      "blob_radius": [2.5, 5.0], "blobs_per_image": [1, 2],
      "fg_intensity": 0.7, "bg_intensity": 0.3, "noise_std": 0.08, "seed": 1}}
  ]{extra}
}}"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn run_writes_rounds_and_summary_csv() {
    let dir = tmp_dir("run");
    let config = write_config(&dir, "");
    let out_dir = dir.join("out");
    run_ok(bin().args([
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let rounds = std::fs::read_to_string(out_dir.join("rounds_fedsoda.csv")).unwrap();
    assert!(rounds.starts_with("round,client_id,method,dice,accuracy,loss_ce,loss_sc\n"));
    // (2 rounds + initial eval) x 2 clients + header
    assert_eq!(rounds.lines().count(), 7);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,avg_dice,avg_accuracy\n"));
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("fedsoda,"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn identical_seeds_give_identical_csv_files() {
    let dir = tmp_dir("det");
    let config = write_config(&dir, "");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        run_ok(bin().args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let a = std::fs::read(out_a.join("rounds_fedsoda.csv")).unwrap();
    let b = std::fs::read(out_b.join("rounds_fedsoda.csv")).unwrap();
    assert_eq!(a, b);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compare_emits_one_summary_row_per_method() {
    let dir = tmp_dir("cmp");
    let config = write_config(&dir, "");
    let out_dir = dir.join("out");
    run_ok(bin().args([
        "compare",
        "--methods",
        "fedavg,fedbn",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out_dir.join("rounds_fedavg.csv").exists());
    assert!(out_dir.join("rounds_fedbn.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tmp_dir("abl");
    let config = write_config(&dir, "");
    let out_dir = dir.join("out");
    run_ok(bin().args([
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let labels: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["none", "so", "da", "so+da", "so+da+lsc"]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_lambda_emits_six_entries() {
    let dir = tmp_dir("swp");
    let config = write_config(&dir, "");
    let out_dir = dir.join("out");
    run_ok(bin().args([
        "sweep",
        "--param",
        "lambda",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let labels: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        ["lambda=0", "lambda=0.2", "lambda=0.4", "lambda=0.6", "lambda=0.8", "lambda=1"]
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_data_writes_ftns_pairs_and_manifest() {
    let dir = tmp_dir("gen");
    let config = write_config(&dir, "");
    let out_dir = dir.join("data");
    run_ok(bin().args([
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
    // 5 samples -> 4 train + 1 eval per client, image+mask each.
    let client0: Vec<_> = std::fs::read_dir(out_dir.join("client_0")).unwrap().collect();
    assert_eq!(client0.len(), 10);
    let first = out_dir.join("client_0/train_0000_image.ftns");
    let bytes = std::fs::read(first).unwrap();
    assert_eq!(&bytes[0..4], &[0x46, 0x54, 0x4E, 0x53]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn grad_check_reports_per_layer() {
    let out = run_ok(bin().args(["grad-check", "--seed", "11"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 6, "{stdout}");
    assert!(stdout.contains("gradient check passed"));
}

#[test]
fn invalid_config_lists_all_problems_and_exits_nonzero() {
    let dir = tmp_dir("bad");
    let path = dir.join("bad.json");
    std::fs::write(&path, r#"{"lambda": 9, "nonsense": true}"#).unwrap();
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda"), "{stderr}");
    assert!(stderr.contains("nonsense"), "{stderr}");
    assert!(stderr.contains("method"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn print_config_echoes_resolved_defaults() {
    let out = run_ok(bin().args(["run", "--print-config", "--seed", "123"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let parsed: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(parsed["seed"], 123);
    assert_eq!(parsed["lambda"], 0.4);
    assert_eq!(parsed["gamma"], 0.25);
    assert_eq!(parsed["method"], "fedsoda");
}

#[test]
fn socket_transport_flag_matches_inproc_output() {
    let dir = tmp_dir("sock");
    let config = write_config(&dir, "");
    let out_a = dir.join("inproc");
    let out_b = dir.join("socket");
    run_ok(bin().args([
        "run", "--config", config.to_str().unwrap(),
        "--transport", "inproc", "--out", out_a.to_str().unwrap(),
    ]));
    run_ok(bin().args([
        "run", "--config", config.to_str().unwrap(),
        "--transport", "socket", "--out", out_b.to_str().unwrap(),
    ]));
    let a = std::fs::read(out_a.join("rounds_fedsoda.csv")).unwrap();
    let b = std::fs::read(out_b.join("rounds_fedsoda.csv")).unwrap();
    assert_eq!(a, b);
    std::fs::remove_dir_all(&dir).ok();
}
