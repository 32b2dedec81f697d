//! Exit codes and flag handling of the `mia-lens` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mia-lens");

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
name = "cli"
dataset = "fmnist"
arch = "mlp"
split_sizes = "100,100,100,100"
baseline_layers = "last"
methods = ["t_test", "ks2samp"]
thresholds = [20, 60]
[classifier]
learning_rate = 1e-3
epochs = 3
[attack]
learning_rate = 1e-3
epochs = 1
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

#[test]
fn unknown_method_is_a_validation_error_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"ks2samp\"", "\"magic\""));
    let out_root = dir.path().join("runs");
    let out = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out_root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    assert!(!out_root.exists());
}

#[test]
fn missing_config_and_bad_usage_exit_2() {
    assert_eq!(run(&["split"]).status.code(), Some(2));
    assert_eq!(run(&["split", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn stage_subcommand_prints_the_run_directory_and_seed_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_root = dir.path().join("runs");
    let args = ["split", "--config", cfg.to_str().unwrap(), "--out", out_root.to_str().unwrap()];
    let a = run(&args);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let run_a = PathBuf::from(String::from_utf8(a.stdout).unwrap().trim());
    assert!(run_a.starts_with(&out_root));
    assert!(run_a.join("splits").join("fmnist.json").exists());
    assert!(run_a.join("stages").join("split.json").exists());
    assert!(!run_a.join("stages").join("train.json").exists());

    let mut seeded = args.to_vec();
    seeded.extend(["--seed", "99"]);
    let b = run(&seeded);
    let run_b = PathBuf::from(String::from_utf8(b.stdout).unwrap().trim());
    assert_ne!(run_a, run_b);
}

#[test]
fn halted_grid_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_root = dir.path().join("runs");
    let out = run(&[
        "grid",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--halt-after-cells",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(3));
}
