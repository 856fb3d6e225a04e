mod common;

use std::path::Path;
use std::process::{Command, Output};

fn nullsample(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nullsample"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn unknown_config_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "dataset = \"adult\"\nlearning_rate = 0.1\n").unwrap();
    let out = nullsample(&["phase1", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn invalid_flag_values_exit_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = nullsample(&["phase2", "--dataset", "adult", "--eta", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = nullsample(&["phase2", "--dataset", "adult", "--model", "baseline-cnn"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = nullsample(&["sweep", "--axis", "depth", "--values", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "dataset = \"adult\"\neta = 0.25\n").unwrap();
    // Overriding with an invalid value proves the flag wins over the file.
    let out = nullsample(&["phase2", "--config", "c.toml", "--eta", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));
}

#[test]
fn exploding_training_exits_with_divergence_status() {
    let Some(mirror) = common::mirror_dir() else { return };
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("div.toml"),
        "dataset = \"adult\"\nepochs = 2\nlambda = 1e6\n[lr]\nencoder = 1e4\nadversary = 1e-3\nclassifier = 1e-3\n",
    )
    .unwrap();
    let cache = common::cache_dir();
    let out = nullsample(
        &[
            "phase1",
            "--config",
            "div.toml",
            "--mirror-dir",
            mirror.to_str().unwrap(),
            "--cache-dir",
            cache.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = nullsample(&["report", "--runs-dir", "."], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("results.csv").exists());
}
