//! Exit codes, output files and error records of the `concm` binary.

use std::path::Path;
use std::process::{Command, Output};

fn concm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concm")).args(args).output().unwrap()
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error record");
    serde_json::from_str(line).unwrap()
}

const SMALL_GEN: &str = r#"{"base_classes": 6, "n_way": 3, "sessions": 2, "d_f": 16, "d_s": 8,
    "attributes": 8, "attributes_per_class": 2, "d_g": 24, "base_samples": 30, "test_samples": 10}"#;

fn generate(dir: &Path) {
    let cfg = dir.join("gen.json");
    std::fs::write(&cfg, SMALL_GEN).unwrap();
    let out = concm(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn fast_run_config(dir: &Path) -> String {
    // Start from the config written by `gen` and shorten training.
    let text = std::fs::read_to_string(dir.join("data/config.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    for (k, v) in [
        ("mpc_episodes", 50),
        ("base_epochs", 3),
        ("incremental_epochs", 2),
        ("samples_base", 10),
    ] {
        cfg[k] = v.into();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_a_manifest_with_every_session() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sessions"].as_array().unwrap().len(), 2);
    for f in [
        "base.csv",
        "session_1.csv",
        "session_2.csv",
        "attributes.json",
        "semantic.csv",
        "truth.json",
    ] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
}

#[test]
fn infeasible_gen_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, r#"{"d_g": 10}"#).unwrap();
    let target = dir.path().join("data");
    let out = concm(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"], "InvalidConfig");
    assert!(!target.exists());
}

#[test]
fn run_writes_reports_and_session_logs() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let config = fast_run_config(dir.path());
    let manifest = dir.path().join("data/manifest.json");
    let out_dir = dir.path().join("out");
    for strategy in ["concm", "rm", "fs", "frozen"] {
        let out = concm(&[
            "run",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            &config,
            "--strategy",
            strategy,
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{strategy}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("AHM"));
    }
    for f in [
        "report.json",
        "report.csv",
        "session_0.log",
        "session_1.log",
        "session_2.log",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }

    let shown = concm(&["report", out_dir.join("report.json").to_str().unwrap()]);
    assert!(shown.status.success());
    let table = String::from_utf8(shown.stdout).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 + 1);
    assert!(table.lines().last().unwrap().starts_with("AHM"));
}

#[test]
fn mismatched_session_count_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let out = concm(&[
        "run",
        "--manifest",
        dir.path().join("data/manifest.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"], "ProtocolViolation");
}

#[test]
fn unknown_strategy_is_rejected() {
    let out = concm(&["run", "--manifest", "m.json", "--strategy", "greedy", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_record(&out)["message"].as_str().unwrap().contains("greedy"));
}

#[test]
fn missing_files_exit_with_io_code() {
    let out = concm(&["report", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_record(&out)["error"], "IoError");
}

#[test]
fn report_names_a_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    std::fs::write(&path, r#"{"sessions": [], "fa": 1.0, "pd": 0.0, "base_acc": 1.0}"#).unwrap();
    let out = concm(&["report", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let record = stderr_record(&out);
    assert_eq!(record["error"], "ParseError");
    assert!(record["message"].as_str().unwrap().contains("ahm"));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = concm(&["gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_record(&out)["error"], "UsageError");
}
