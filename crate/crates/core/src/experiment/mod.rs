//! Experiment harness: configuration, synthetic tasks, runners, reports and
//! the self-check suite behind `aurora-bench verify`.

pub mod bounds;
pub mod config;
pub mod report;
pub mod runners;
pub mod task;
pub mod verify;

pub use config::{ExperimentConfig, ExperimentKind, InputDistribution, Teacher};
pub use report::{Aggregate, Record, Report, RunArtifact, CSV_COLUMNS};
pub use runners::{run, run_with};
