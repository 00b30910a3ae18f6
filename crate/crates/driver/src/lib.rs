//! Experiment driver: configuration, the policy-iteration loop, policy
//! files, state archives and the export of activation traces and learning
//! curves.

pub mod archive;
pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod plot;
pub mod serialize;
pub mod trace;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{run_diffproto, run_experiment, IterationRecord, RunError, RunOptions, RunOutput};
