//! IO, file formats, and the experiment harness around `noisyseg-core`:
//! dataset directories with STF1 tensors and JSON manifests, model
//! checkpoints, metric reports, and the ablation runner behind the CLI.

pub mod ablate;
pub mod checkpoint;
pub mod dataset;
pub mod manifest;
pub mod report;
pub mod stf_io;

use std::fmt;

/// Error with the exit-code class it maps to: config errors exit 2, data
/// errors 3, numeric divergence 4, anything else 1.
#[derive(Debug)]
pub enum AppError {
    /// Malformed or inconsistent configuration input.
    Config(String),
    /// Missing, unreadable, or malformed data files.
    Data(String),
    /// Training produced non-finite values.
    Divergence(String),
    Other(anyhow::Error),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Divergence(_) => 4,
            AppError::Other(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(msg) => write!(f, "config error: {msg}"),
            AppError::Data(msg) => write!(f, "data error: {msg}"),
            AppError::Divergence(msg) => write!(f, "numeric divergence: {msg}"),
            AppError::Other(err) => write!(f, "{err}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<anyhow::Error> for AppError {
    fn from(err: anyhow::Error) -> Self {
        AppError::Other(err)
    }
}

impl From<std::io::Error> for AppError {
    fn from(err: std::io::Error) -> Self {
        AppError::Data(err.to_string())
    }
}

impl From<noisyseg_core::model::ModelError> for AppError {
    fn from(err: noisyseg_core::model::ModelError) -> Self {
        match err {
            noisyseg_core::model::ModelError::Divergence { .. } => {
                AppError::Divergence(err.to_string())
            }
            noisyseg_core::model::ModelError::InvalidConfig(_)
            | noisyseg_core::model::ModelError::Loss(_) => AppError::Config(err.to_string()),
            _ => AppError::Data(err.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
