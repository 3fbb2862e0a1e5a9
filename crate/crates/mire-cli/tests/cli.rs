//! End-to-end checks of the binary surface: artifact shapes, precedence,
//! determinism, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn mire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mire"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The single spec-hashed directory a command just wrote under `root`.
fn only_dir(root: &Path) -> std::path::PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected one artifact dir in {root:?}");
    dirs.pop().unwrap()
}

fn read_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

const SMALL: &[&str] = &["--samples-per-class", "40", "--seeds", "0..1"];

#[test]
fn repeat_invocations_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let mut args = vec!["run", "--out", dir.path().to_str().unwrap()];
        args.extend_from_slice(SMALL);
        assert_ok(&mire(&args));
    }
    let (da, db) = (only_dir(a.path()), only_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name(), "same spec, same hash");
    let (fa, fb) = (read_sorted(&da), read_sorted(&db));
    assert_eq!(
        fa.iter().map(|f| &f.0).collect::<Vec<_>>(),
        fb.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    for ((name, bytes_a), (_, bytes_b)) in fa.iter().zip(fb.iter()) {
        assert_eq!(bytes_a, bytes_b, "{name} differs between invocations");
    }
}

#[test]
fn run_artifacts_have_expected_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--out", tmp.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_ok(&mire(&args));
    let dir = only_dir(tmp.path());

    let runs = std::fs::read_to_string(dir.join("runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,seed,final_acc,final_fgt,final_mean_error_current,final_mean_error_corrected"
    );
    assert_eq!(lines.count(), 2, "one row per seed");

    // 5 tasks -> lower-triangular matrix has 15 cells per run
    let matrix = std::fs::read_to_string(dir.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 1 + 2 * 15);

    let snapshots = std::fs::read_to_string(dir.join("snapshots.csv")).unwrap();
    assert_eq!(snapshots.lines().count(), 1 + 2 * 5);

    for seed in ["0", "1"] {
        assert!(dir.join(format!("mire++-s{seed}.trainer")).is_file());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["failures"].as_array().unwrap().is_empty());
    assert!(summary["methods"]["mire++"]["mean_acc"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();

    let bad_method = mire(&["run", "--out", out, "--method", "bogus"]);
    assert!(!bad_method.status.success());
    assert!(String::from_utf8_lossy(&bad_method.stderr).contains("unknown method"));

    let bad_seeds = mire(&["run", "--out", out, "--seeds", "9..1"]);
    assert!(!bad_seeds.status.success());
    assert!(String::from_utf8_lossy(&bad_seeds.stderr).contains("backwards"));

    let bad_flag = mire(&["run", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2), "clap usage errors exit 2");

    let bad_key = tmp.path().join("bad.json");
    std::fs::write(&bad_key, r#"{"learning_rate": 0.1}"#).unwrap();
    let bad_config = mire(&["run", "--out", out, "--config", bad_key.to_str().unwrap()]);
    assert!(!bad_config.status.success());
}

#[test]
fn gradcheck_small_budget_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mire(&[
        "gradcheck",
        "--trials",
        "2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let dir = only_dir(tmp.path());
    let table = std::fs::read_to_string(dir.join("gradcheck.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3, "three losses per trial");
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn theory_small_budget_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mire(&[
        "theory",
        "--starts",
        "12",
        "--max-iters",
        "4000",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let dir = only_dir(tmp.path());
    let table = std::fs::read_to_string(dir.join("theory.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2, "one row per lambda");
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")));
}

#[test]
fn config_file_resolves_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"seeds": "3", "lr": 0.02, "samples_per_class": 40, "method": "mire"}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    assert_ok(&mire(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--lr",
        "0.03",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let dir = only_dir(&out_dir);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let spec = &summary["spec"];
    assert_eq!(spec["train"]["lr"].as_f64().unwrap(), 0.03, "flag wins");
    assert_eq!(spec["seeds"], serde_json::json!([3]));
    assert_eq!(spec["methods"], serde_json::json!(["mire"]));
    assert_eq!(
        spec["train"]["stream"]["samples_per_class"].as_u64().unwrap(),
        40
    );
}

#[test]
fn json_format_emits_valid_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "run",
        "--format",
        "json",
        "--out",
        tmp.path().to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    assert_ok(&mire(&args));
    let dir = only_dir(tmp.path());
    assert!(!dir.join("runs.csv").exists());
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("runs.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["final_acc"].is_string(), "cells stay verbatim");
}
