//! Experiment orchestration: configuration, multi-seed runs, evaluation,
//! summary statistics and figures.

mod calibrate;
mod config;
mod plot;
mod run;
mod stats;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::algorithms::AlgoError;
use crate::envs::EnvError;

pub use crate::algorithms::apply_hardcore_shaping;
pub use calibrate::{calibrate, Calibration};
pub use config::ExperimentConfig;
pub use plot::{emit_plot, smooth, CurveMeta, PlotMeta, PlotStyle, Series, DEFAULT_WINDOW};
pub use run::{
    eval_seeds, evaluate_on_seeds, evaluate_policy, load_records, load_summary, run_experiment, ExperimentSummary,
    MetricRow, RunOutcome, CHECKPOINT_DIR, CONFIG_FILE, EVALS_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use stats::{
    best_average, best_instance, instance_steps_to_reference, median_steps, std_at, steps_to_reference, EvalRecord,
    EvalTable, ReferencePoint, RunSummary, SampleComplexity,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "FORK_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("statistics: {0}")]
    Stats(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// `$FORK_OUTPUT_ROOT` if set, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}
