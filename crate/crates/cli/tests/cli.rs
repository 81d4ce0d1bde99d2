use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn enseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn error_code(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"].as_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_dataset_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = enseg(&["stats", "--data", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "E_DATASET_NOT_FOUND");
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = enseg(&["make-synthetic", "--out", "data", "--count", "8"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(
        d.join("exp.json"),
        r#"{"dataset": {"root": "data", "split": {"mode": "random"}},
            "preprocess": {"target_height": 64, "target_width": 96, "augment": null},
            "model": {"architecture": "unet", "num_classes": 3},
            "train": {"epochs": 1, "train_batch_size": 4},
            "output": {"dir": "runs", "run_name": "t"}}"#,
    )
    .unwrap();
    let out = enseg(&["train", "--config", "exp.json"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = d.join("runs/t");
    for f in ["config.resolved.json", "history.jsonl", "best.ckpt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(json(&run.join("config.resolved.json"))["train"]["learning_rate"], 0.0001);

    let out = enseg(&["eval", "--config", "exp.json", "--checkpoint", "missing.ckpt"], d);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "E_CHECKPOINT_NOT_FOUND");

    let ckpt = run.join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = enseg(&["eval", "--config", "exp.json", "--checkpoint", ckpt, "--out", "single"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = enseg(
        &["ensemble-eval", "--config", "exp.json", "--checkpoints", ckpt, ckpt, "--out", "dup"],
        d,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Fusing a model with itself must not change any metric.
    let single = json(&d.join("single/metrics_unet_efficientnet-b0.json"));
    let dup = json(&d.join("dup/metrics_EL-custom.json"));
    assert_eq!(single["splits"], dup["splits"]);
    assert!(d.join("dup/table_iou_EL-custom.txt").is_file());

    let out = enseg(
        &["ensemble-eval", "--config", "exp.json", "--checkpoints", ckpt, ckpt, "--weights", "1", "2", "3"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "E_CONFIG");
}
