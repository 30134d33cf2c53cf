//! Experiment driver for the evolving expert mixture: config loading,
//! multi-seed runs, λ sweeps, JSON reports and checkpoints.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod report;
pub mod run;

pub use config::{ModelConfig, RunConfig, SourceKind, StreamConfig};
pub use report::{Checkpoint, Event, EventSink, JsonlSink, RunMetrics, SeedMetrics, SweepRow};
pub use run::{evaluate_accuracy, lambda_sweep, run_experiment, DataSource, SeedRun};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] emm_core::EmmError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}
