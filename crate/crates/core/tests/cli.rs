//! The `bp-shift` binary end to end on a tiny cohort.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bpshift::cli::{manifest_name, Manifest, LOCK_FILE};
use tempfile::TempDir;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bp-shift"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn bp-shift")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bin(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(dir: &Path, command: &str) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join(manifest_name(command))).unwrap()).unwrap()
}

/// A config small enough for seconds-long training.
fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(
        &p,
        r#"{"seed":7,"per_class":30,"test1_per_class":10,"n_test1_patients":3,"n_test2_patients":2,"batch_size":16}"#,
    )
    .unwrap();
    p
}

fn cohort(dir: &Path) -> String {
    let cfg = small_config(dir);
    ok(dir, &["synth", "--preset", "learnable", "--seed", "7", "--patients", "12", "--segments", "30"]);
    cfg.to_string_lossy().into_owned()
}

#[test]
fn unknown_arch_lists_the_choices() {
    let dir = TempDir::new().unwrap();
    let out = bin(dir.path(), &["train", "--arch", "lstm"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    for a in ["mlp", "cnn", "resnet", "encoder"] {
        assert!(msg.contains(a), "{msg}");
    }
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"per_class": 0}"#).unwrap();
    let out = bin(dir.path(), &["--config", p.to_str().unwrap(), "label"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn held_lock_refuses_the_run() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join(LOCK_FILE), "").unwrap();
    let out = bin(dir.path(), &["synth", "--patients", "2", "--segments", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("segments").exists());
    // a finished run releases its own lock
    std::fs::remove_file(dir.path().join(LOCK_FILE)).unwrap();
    ok(dir.path(), &["synth", "--patients", "2", "--segments", "3"]);
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn train_writes_checkpoint_history_and_manifest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = cohort(d);
    ok(
        d,
        &[
            "--config", &cfg, "train", "--arch", "encoder", "--input-type", "sdppg", "--bp-type", "mbp",
            "--epochs", "2", "--per-class", "30",
        ],
    );
    assert!(d.join("model.ckpt").is_file());
    let history = std::fs::read_to_string(d.join("history.ndjson")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let m = manifest(d, "train");
    assert_eq!(m.command, "train");
    assert_eq!(m.config.per_class, 30);
    assert_eq!(m.parents, ["synth.manifest.json"]);
    let outs: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
    assert_eq!(outs, ["model.ckpt", "history.ndjson"]);
}

#[test]
fn evaluate_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = cohort(d);
    ok(d, &["--config", &cfg, "train", "--epochs", "1"]);
    ok(d, &["--config", &cfg, "evaluate", "--out", "a.json"]);
    ok(d, &["--config", &cfg, "evaluate", "--out", "b.json"]);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let names: Vec<&str> = report["sets"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"test1") && names.contains(&"test2"), "{names:?}");
}

#[test]
fn manifests_chain_through_the_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = cohort(d);
    for step in [
        vec!["ingest"],
        vec!["features"],
        vec!["label"],
        vec!["sample"],
        vec!["split"],
        vec!["train", "--dataset", "dataset", "--epochs", "1"],
    ] {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend(step);
        ok(d, &args);
    }
    assert!(manifest(d, "synth").parents.is_empty());
    assert_eq!(manifest(d, "ingest").parents, ["synth.manifest.json"]);
    assert_eq!(manifest(d, "features").parents, ["ingest.manifest.json"]);
    assert_eq!(manifest(d, "label").parents, ["ingest.manifest.json"]);
    assert_eq!(manifest(d, "sample").parents, ["ingest.manifest.json", "label.manifest.json"]);
    assert_eq!(manifest(d, "split").parents, ["sample.manifest.json"]);
    assert_eq!(manifest(d, "train").parents, ["sample.manifest.json", "split.manifest.json"]);
    let csv = std::fs::read_to_string(d.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 * 30);
}

#[test]
fn experiment_commands_write_their_tables() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = cohort(d);
    let run = |extra: &[&str]| {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend_from_slice(extra);
        ok(d, &args);
    };
    run(&["sweep", "--epochs", "1", "--grid", "10,20", "--reuse-model"]);
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    run(&["ablate", "--epochs", "1"]);
    let ablation: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(d.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(ablation.len(), 2);

    run(&["matrix", "--epochs", "1", "--archs", "mlp", "--inputs", "sdppg", "--bp-types", "sbp", "--lengths", "7", "--no-ablation"]);
    let summary = std::fs::read_to_string(d.join("matrix_summary.csv")).unwrap();
    assert!(summary.lines().count() >= 2, "{summary}");

    run(&["bands"]);
    let bands = std::fs::read_to_string(d.join("bands.csv")).unwrap();
    assert_eq!(bands.lines().count(), 30);
    let m = manifest(d, "bands");
    assert_eq!(m.details["predictor"], "truth");

    let out = bin(d, &["--config", &cfg, "matrix", "--lengths", "4"]);
    assert_eq!(out.status.code(), Some(2));
}
