//! End-to-end smoke tests for the `flowcast` binary: simulate a tiny dataset,
//! train one epoch, evaluate the checkpoint, and draw samples, checking that
//! each stage produces the files the next stage consumes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, stage: &str) {
    assert!(
        out.status.success(),
        "{stage} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

#[test]
fn simulate_train_evaluate_sample_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let report = dir.path().join("report.json");
    let samples = dir.path().join("samples.csv");

    let out = flowcast(&[
        "simulate",
        "--instances", "12",
        "--grid-points", "11",
        "--keep", "0.6",
        "--mode", "syn",
        "--seed", "7",
        "--out", data.to_str().unwrap(),
    ]);
    assert_ok(&out, "simulate");
    for f in ["data.csv", "manifest.json", "run_manifest.json"] {
        assert!(data.join(f).is_file(), "simulate should write {f}");
    }

    let out = flowcast(&[
        "train",
        "--cell", "gruode",
        "--joint", "gaussian",
        "--mode", "syn",
        "--hidden", "4",
        "--epochs", "1",
        "--batch-size", "4",
        "--seed", "7",
        "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert_ok(&out, "train");
    for f in ["checkpoint.json", "loss.csv", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "train should write {f}");
    }
    let loss_csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("epoch,train_loss,valid_loss\n"));
    assert_eq!(loss_csv.lines().count(), 2, "header plus one epoch");

    let ckpt = run.join("checkpoint.json");
    let out = flowcast(&[
        "evaluate",
        "--ckpt", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--samples", "20",
        "--out", report.to_str().unwrap(),
    ]);
    assert_ok(&out, "evaluate");
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["schema_version"], 1);
    assert_eq!(parsed["split"], "test");
    assert_eq!(parsed["runs"].as_array().unwrap().len(), 1);
    assert!(parsed["summary"]["crps"]["mean"].as_f64().unwrap().is_finite());

    // Any instance id from the saved CSV works for sampling.
    let first_id = instance_id_from_csv(&data.join("data.csv"));
    let out = flowcast(&[
        "sample",
        "--ckpt", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--instance", &first_id,
        "--from-event", "0",
        "--n", "5",
        "--out", samples.to_str().unwrap(),
    ]);
    assert_ok(&out, "sample");
    let csv = fs::read_to_string(&samples).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("event,time,x_1"));
    assert_eq!(lines.count(), 5, "five sample rows for one event");
}

fn instance_id_from_csv(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let row = text.lines().nth(1).expect("data row");
    row.split(',').next().unwrap().to_string()
}

#[test]
fn evaluate_aggregates_repeated_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    assert_ok(
        &flowcast(&[
            "simulate", "--instances", "10", "--grid-points", "9", "--keep", "0.7",
            "--mode", "asyn", "--seed", "3", "--out", data.to_str().unwrap(),
        ]),
        "simulate",
    );
    assert_ok(
        &flowcast(&[
            "train", "--cell", "gru-d", "--joint", "gaussian", "--mode", "asyn",
            "--hidden", "4", "--epochs", "1", "--batch-size", "4", "--seed", "3",
            "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(),
        ]),
        "train",
    );
    let ckpt = run.join("checkpoint.json");
    let out = flowcast(&[
        "evaluate",
        "--ckpt", ckpt.to_str().unwrap(),
        "--ckpt", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--samples", "10",
    ]);
    assert_ok(&out, "evaluate");
    let parsed: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(parsed["runs"].as_array().unwrap().len(), 2);
    assert_eq!(parsed["summary"]["n_runs"], 2);
    // Identical checkpoints with identical seeds agree, so the spread is zero.
    assert_eq!(parsed["summary"]["crps"]["std"].as_f64().unwrap(), 0.0);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_ok(
        &flowcast(&[
            "simulate", "--instances", "10", "--grid-points", "9", "--keep", "0.7",
            "--mode", "syn", "--seed", "5", "--out", data.to_str().unwrap(),
        ]),
        "simulate",
    );
    let cfg_path = dir.path().join("cfg.json");
    fs::write(
        &cfg_path,
        r#"{"cell":"gruode","joint":"gaussian","mode":"syn","hidden":4,"epochs":9}"#,
    )
    .unwrap();
    assert_ok(
        &flowcast(&[
            "train",
            "--config", cfg_path.to_str().unwrap(),
            "--epochs", "1",
            "--batch-size", "4",
            "--data", data.to_str().unwrap(),
            "--out", run.to_str().unwrap(),
        ]),
        "train with config",
    );
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["config"]["epochs"], 1, "flag overrides config file");
    assert_eq!(ckpt["config"]["hidden"], 4, "config file fields survive");
}

#[test]
fn bad_invocations_exit_nonzero() {
    let out = flowcast(&["train", "--data", "x", "--out", "y"]);
    assert!(!out.status.success(), "missing required flags must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--cell"), "error names the missing flag: {stderr}");

    let out = flowcast(&["simulate", "--bogus-flag"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let out = flowcast(&[
        "evaluate", "--ckpt", "/nonexistent/ckpt.json",
        "--data", dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "missing files must fail cleanly");
}
