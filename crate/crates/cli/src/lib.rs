//! Orchestration of the desk-scale reproduction: curate, mix, the four
//! training stages and evaluation, with hash-gated resume.

pub mod config;
pub mod grid;
pub mod manifest;
pub mod pipeline;

use thiserror::Error;

pub use config::RunConfig;
pub use grid::{run_grid, GridReport, GridRow};
pub use manifest::{RunManifest, StageStatus};
pub use pipeline::{RunLayout, Runner, Through};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage: stage.into(),
            message: err.to_string(),
        }
    }

    /// 1 for validation failures, 2 for anything that fails mid-run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }
}
