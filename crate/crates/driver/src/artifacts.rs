//! Files written by a training run:
//!
//! - `config.toml`: the effective configuration,
//! - `metrics.tsv`: one row per iteration, appended as the run progresses,
//! - `policy.txt`: the final policy,
//! - `states.bin`: every visited state, when archiving is requested,
//! - `crash_policy.txt`: the policy in effect when a run aborted.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::archive::{write_states, ArchiveError};
use crate::config::ExperimentConfig;
use crate::experiment::{metrics_header, run_with_observer, RunError, RunOptions, RunOutput};
use crate::serialize::{policy_to_string, save_policy};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const POLICY_FILE: &str = "policy.txt";
pub const STATES_FILE: &str = "states.bin";
pub const CRASH_FILE: &str = "crash_policy.txt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Runs `cfg` and writes its artifacts into `out_dir`.
pub fn train_to_dir(cfg: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<RunOutput, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let config_text = toml::to_string(cfg).expect("configs serialize");
    std::fs::write(&config_path, config_text).map_err(io_err(&config_path))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    metrics.write_all(metrics_header().as_bytes()).map_err(io_err(&metrics_path))?;
    let mut write_error = None;
    let result = run_with_observer(cfg, opts, |record, _, _| {
        if write_error.is_none() {
            if let Err(e) = writeln!(metrics, "{}", record.tsv_row()).and_then(|_| metrics.flush()) {
                write_error = Some(e);
            }
        }
        log::info!(
            "iteration {} eval {:.1} kl {:.4} entropy {:.3} active {}",
            record.iteration,
            record.eval_mean,
            record.expected_kl,
            record.entropy,
            record.active
        );
    });
    if let Some(e) = write_error {
        return Err(io_err(&metrics_path)(e));
    }
    let output = match result {
        Ok(output) => output,
        Err(err) => {
            if let Some(policy) = &err.policy {
                let crash_path = out_dir.join(CRASH_FILE);
                let text = format!("# aborted at {err}\n{}", policy_to_string(policy));
                std::fs::write(&crash_path, text).map_err(io_err(&crash_path))?;
            }
            return Err(err.into());
        }
    };
    let policy_path = out_dir.join(POLICY_FILE);
    save_policy(&output.policy, &policy_path).map_err(io_err(&policy_path))?;
    if let Some(states) = &output.visited {
        write_states(&out_dir.join(STATES_FILE), states)?;
    }
    Ok(output)
}
