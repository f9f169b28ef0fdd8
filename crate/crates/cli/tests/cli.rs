use std::path::Path;
use std::process::{Command, Output};

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stratimpute"))
        .env("STRATIMPUTE_DATA", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = run(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_archive(root: &Path) {
    ok(
        root,
        &[
            "synth",
            "--patients",
            "60",
            "--horizon",
            "12",
            "--seed",
            "5",
        ],
    );
    ok(root, &["tensorize", "--horizon", "12"]);
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn synth_writes_csvs_under_the_data_root() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--patients", "20", "--seed", "1"]);
    for f in ["events.csv", "statics.csv", "labels.csv"] {
        assert!(dir.path().join("raw").join(f).exists(), "{f}");
    }
}

#[test]
fn imputation_train_then_evaluate_reports_mae_not_auroc() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_archive(root);
    ok(
        root,
        &[
            "train",
            "--task",
            "imputation",
            "--epochs",
            "2",
            "--batch-size",
            "16",
        ],
    );
    assert!(root.join("checkpoint.safetensors").exists());
    let ckpt = root.join("checkpoint.safetensors");
    let json = ok(
        root,
        &[
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--format",
            "json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["imputation"]["mae"].is_number());
    assert!(v["imputation"]["mre"].is_number());
    assert!(v.get("prediction").is_none());
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_archive(root);
    let cfg = root.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"task": "prediction", "variant": "no_graph"}, "epochs": 50, "batch_size": 16}"#,
    )
    .unwrap();
    ok(
        root,
        &["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"],
    );
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("checkpoint.log.json")).unwrap())
            .unwrap();
    assert_eq!(log.as_array().unwrap().len(), 1);
    let table = ok(
        root,
        &[
            "evaluate",
            "--checkpoint",
            root.join("checkpoint.safetensors").to_str().unwrap(),
        ],
    );
    assert!(table.contains("prediction / no_graph / test"), "{table}");
    assert!(table.contains("auroc"));

    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = run(root, &["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_rejects_an_incompatible_archive() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_archive(root);
    ok(
        root,
        &[
            "train",
            "--task",
            "prediction",
            "--epochs",
            "1",
            "--batch-size",
            "16",
        ],
    );
    let other = root.join("other.safetensors");
    ok(
        root,
        &[
            "tensorize",
            "--horizon",
            "10",
            "--output",
            other.to_str().unwrap(),
        ],
    );
    let out = run(
        root,
        &[
            "evaluate",
            "--checkpoint",
            root.join("checkpoint.safetensors").to_str().unwrap(),
            "--data",
            other.to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon T"));
}

#[test]
fn missing_archive_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--epochs", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn ablate_prints_three_rows_of_four_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_archive(root);
    let report = root.join("ablation.json");
    let table = ok(
        root,
        &[
            "ablate",
            "--seeds",
            "2",
            "--epochs",
            "1",
            "--batch-size",
            "16",
            "--report",
            report.to_str().unwrap(),
        ],
    );
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    for (line, v) in lines[1..]
        .iter()
        .zip(["full", "no_graph", "no_contrastive"])
    {
        assert!(line.starts_with(v), "{line}");
    }
    for m in ["mae", "mre", "auroc", "auprc"] {
        assert!(lines[0].contains(m), "{}", lines[0]);
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["aggregate"].as_array().unwrap().len(), 3);
    assert_eq!(v["runs"].as_array().unwrap().len(), 6);
}
