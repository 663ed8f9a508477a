use std::path::PathBuf;

use thiserror::Error;

use crate::model::SmoothNet;
use crate::trainer::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the robust-training library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid label for this model head: {message}")]
    InvalidLabel { message: String },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid model: {message}")]
    InvalidModel { message: String },
    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },
    #[error("cost `{kind}` has no smooth gradient; use the proximal solver")]
    UnsupportedSmoothGradient { kind: String },
    #[error("labels differ, covariate-shift cost is infinite")]
    LabelMismatch,
    #[error("empty input: {context}")]
    EmptyInput { context: &'static str },
    #[error("infeasible problem: {message}")]
    Infeasible { message: String },
    #[error("unbounded problem")]
    Unbounded,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_finite: Box<SmoothNet>,
        report: Box<TrainReport>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Checkpoint(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            message: message.into(),
        }
    }
}
