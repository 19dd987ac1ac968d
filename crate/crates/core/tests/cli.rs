//! Exit codes and outputs of the command-line tool.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xeegnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xeegnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const FAST: [&str; 10] = ["--outer", "2", "--inner", "2", "--epochs", "2", "--lr", "0.01", "--jobs", "1"];

fn make_dataset(dir: &Path) -> String {
    let out = dir.join("data");
    let o = xeegnet(&[
        "synth", "--subjects", "3", "--channels", "3", "--length", "12", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = out.join("manifest.json");
    assert!(manifest.exists());
    manifest.to_str().unwrap().to_string()
}

#[test]
fn successful_run_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["nlnso", "--no-analyses", "--data", &manifest, "--out", run.to_str().unwrap()];
    args.extend(FAST);
    let o = xeegnet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("summary.json").exists());
    assert_eq!(fs::read_to_string(run.join("splits.csv")).unwrap().lines().count(), 5);
}

#[test]
fn unknown_preset_is_a_config_error() {
    let o = xeegnet(&["inspect", "weights", "--preset", "NoSuchNet"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("xEEGNet"));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let mut args = vec!["nlnso", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    args.extend(FAST);
    assert_eq!(code(&xeegnet(&args)), 2);
}

#[test]
fn failing_splits_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(dir.path());
    // Poison one recording so every split that trains or validates on it fails.
    let raw = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "f32"))
        .unwrap();
    let bytes: Vec<u8> = fs::read(&raw).unwrap().chunks(4).flat_map(|_| f32::NAN.to_le_bytes()).collect();
    fs::write(&raw, bytes).unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["nlnso", "--no-analyses", "--data", &manifest, "--out", run.to_str().unwrap()];
    args.extend(FAST);
    let o = xeegnet(&args);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("splits.csv")).unwrap();
    assert!(csv.lines().skip(1).any(|l| l.contains("failed")));
    assert!(csv.lines().skip(1).any(|l| l.contains(",ok,")));
}
