//! Benchmark harness for the `cnn-engine` inference engine.
//!
//! Runs the optimization ladder (baseline, conv-opt, cache-opt, fuse),
//! batch-size sweeps and multi-instance runs, and emits reports as CSV, JSON
//! or a plain table.

pub mod affinity;
pub mod checks;
pub mod config;
pub mod report;
pub mod runner;

pub use config::{LadderStep, ModelSource, OutputFormat, RunConfig};
pub use report::{emit_report, BenchReport, InstanceReport, LatencyStats};
pub use runner::{run_batch_sweep, run_ladder, run_multi_instance, run_step, StepOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Engine(#[from] cnn_engine::Error),

    #[error("invalid run configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, BenchError>;
