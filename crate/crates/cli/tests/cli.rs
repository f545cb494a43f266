use std::path::Path;
use std::process::{Command, Output};

use fse_core::engine::EvalReport;

fn fse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fse"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fse(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn smoke_sequence_on_default_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let start = std::time::Instant::now();
    for step in ["synth", "pretrain", "finetune", "index", "train-rank"] {
        ok(d, &[step]);
    }
    let json = ok(d, &["eval"]);
    let report = EvalReport::from_json(&json).unwrap();
    assert!(report.precision.unwrap().at(5).unwrap() > 0.5);
    assert!(start.elapsed().as_secs() < 600);

    let listing = ok(d, &["query", "--id", "ex0000", "--top", "5"]);
    assert!(!listing.is_empty() && !listing.contains("\tex0000\t"));

    let bad = fse(d, &["query", "--id", "missing-id"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("not found"));

    ok(d, &["export-embeddings", "emb.txt"]);
    let lines = std::fs::read_to_string(d.join("emb.txt")).unwrap();
    assert_eq!(lines.lines().count(), 500);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fse(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_artifacts_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = fse(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing snapshots"));
}

#[test]
fn config_file_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fse.toml"), "[paths]\ncorpus = \"elsewhere/c.snap\"\n").unwrap();
    std::fs::write(d.join("spec.toml"), "n_templates = 3\nper_template = 4\nn_pairs = 10\n").unwrap();
    let msg = ok(d, &["--config", "fse.toml", "synth", "--spec", "spec.toml", "--noise", "0"]);
    assert!(msg.contains("12 exercises"), "{msg}");
    assert!(d.join("elsewhere/c.snap").exists());
    let bad = fse(d, &["--config", "nope.toml", "synth"]);
    assert_eq!(bad.status.code(), Some(1));
}
