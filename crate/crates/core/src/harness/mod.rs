//! Configuration, cached pipeline stages, evaluation and reporting.

mod config;
mod evaluate;
mod pipeline;
mod report;
mod store;

pub use config::{EvalConfig, PipelineConfig, PolicyConfig, VaeDataConfig};
pub use evaluate::{evaluate, trajectory_csv, EvalOptions, EvalOutcome, Metrics};
pub use pipeline::{ensure_adapted, ensure_track, load_trained, run_pipeline, PipelineRun, StageStatus, Trained, STAGES};
pub use report::{write_report, ReportSummary};
pub use store::{sha256_hex, stage_key, ArtifactStore, Manifest, MANIFEST};

use std::path::PathBuf;

use thiserror::Error;

/// Appended wall-clock log; the only artifact allowed to differ between runs.
pub const TIMINGS_FILE: &str = "timings.log";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}{}", telemetry.as_ref().map(|p| format!(" (see {})", p.display())).unwrap_or_default())]
    Stage {
        stage: String,
        message: String,
        telemetry: Option<PathBuf>,
    },
    #[error("missing artifact for stage {stage}: {detail}")]
    MissingArtifact { stage: String, detail: String },
    #[error("no artifacts in {0}")]
    NoArtifacts(PathBuf),
}

impl HarnessError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Stage { .. } => 3,
            HarnessError::MissingArtifact { .. } | HarnessError::NoArtifacts(_) => 4,
        }
    }

    pub(crate) fn detail(&self) -> String {
        match self {
            HarnessError::Config(m) => m.clone(),
            other => other.to_string(),
        }
    }
}
