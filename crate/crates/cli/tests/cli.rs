//! End-to-end runs of the binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coverhunter"))
        .current_dir(dir)
        .args(["--preset", "toy", "--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

/// Overrides that shrink the toy preset to a seconds-long run.
const TINY: &[&str] = &[
    "--set",
    "cqt.bins=24",
    "--set",
    "cqt.f_min=130.81",
    "--set",
    "encoder.input_bins=24",
    "--set",
    "encoder.model_dim=8",
    "--set",
    "encoder.heads=2",
    "--set",
    "encoder.n_blocks=1",
    "--set",
    "encoder.conv_kernel=3",
    "--set",
    "encoder.bottleneck_dim=8",
    "--set",
    "train.p_classes=3",
    "--set",
    "train.k_samples=2",
    "--set",
    "align.threshold=-1.0",
    "--set",
    "retrieval.chunk_s=15.0",
    "--set",
    "retrieval.hop_s=15.0",
    "--coarse-steps",
    "3",
    "--fine-steps",
    "2",
];

fn tiny(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = TINY.to_vec();
    all.extend_from_slice(args);
    run(dir, &all)
}

fn synth(dir: &Path) {
    let out = tiny(
        dir,
        &["synth-corpus", "--works", "3", "--versions", "3", "--duration", "20", "--prelude-max", "7.5"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn align_without_checkpoint_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = tiny(dir.path(), &["align"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-coarse"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--set", "encoder.input_bins=7", "config"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[train\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.toml", "config"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["--config", "absent.toml", "config"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_output_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--seed", "9", "config"]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("c.toml"), &out.stdout).unwrap();
    let again = run(dir.path(), &["--config", "c.toml", "config"]);
    assert!(again.status.success());
    assert_eq!(out.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 9"));
}

#[test]
fn dry_run_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = tiny(dir.path(), &["--dry-run", "pipeline"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("eval          pending"), "{text}");
    assert!(!dir.path().join("work").exists());
}

#[test]
fn stagewise_run_and_repeated_eval() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for stage in ["extract", "train-coarse", "align", "train-fine", "embed", "index", "search", "eval"] {
        let out = tiny(dir.path(), &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = dir.path().join("work/reports/eval.txt");
    let first = std::fs::read(&report).unwrap();
    let out = tiny(dir.path(), &["--force", "eval"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&report).unwrap(), first);
    assert!(String::from_utf8_lossy(&out.stdout).contains("map"));
    let search = std::fs::read_to_string(dir.path().join("work/reports/search.tsv")).unwrap();
    assert_eq!(search.lines().count(), 1 + 3 * 8);
}

#[test]
fn pipeline_subcommand_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = tiny(dir.path(), &["pipeline"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("work/reports/eval.txt").exists());
    assert!(dir.path().join("work/ckpt/fine.ckpt").exists());
}
