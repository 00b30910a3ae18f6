use std::path::Path;
use std::process::{Command, Output};

use moie_driver::ExperimentConfig;

fn moie(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moie")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn init_config_prints_the_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = moie(&["init-config"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("typo.toml"), "clustres = 4\n").unwrap();
    std::fs::write(dir.path().join("invalid.toml"), "epsilon = -1.0\n").unwrap();
    for file in ["typo.toml", "invalid.toml", "absent.toml"] {
        let out = moie(&["train", "--config", file], dir.path());
        assert_eq!(out.status.code(), Some(2), "{file}");
    }
    assert_eq!(moie(&["train", "--env", "cartpole"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_policy_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = moie(&["eval", "--policy", "nope.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_trace_and_plot_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), "iterations = 2\nsteps_per_iteration = 400\neval_rollouts = 2\n").unwrap();
    let out = moie(&["train", "--config", "small.toml", "--out-dir", "run", "--seed", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = moie(&["eval", "--policy", "run/policy.txt", "--episodes", "2"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("mean\t")));

    let out = moie(&["trace", "--policy", "run/policy.txt", "--out", "trace.tsv"], dir.path());
    assert!(out.status.success());
    let trace = std::fs::read_to_string(dir.path().join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 201);

    let out = moie(&["plot", "run/metrics.tsv", "run/metrics.tsv", "--out", "curve.svg"], dir.path());
    assert!(out.status.success());
    assert!(std::fs::read_to_string(dir.path().join("curve.svg")).unwrap().contains("<polyline"));

    // a policy for another environment is rejected as a config problem
    let out = moie(&["eval", "--policy", "run/policy.txt", "--env", "pointmass"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), "iterations = 1\nsteps_per_iteration = 200\neval_rollouts = 1\n").unwrap();
    let out = moie(&["sweep", "--config", "small.toml", "--seeds", "1,2", "--out-dir", "sweep"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [1, 2] {
        assert!(dir.path().join(format!("sweep/seed_{seed}/policy.txt")).exists());
    }
}
