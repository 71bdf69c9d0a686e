use thiserror::Error;

use crate::model::FodeModel;

pub type Result<T, E = FodeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FodeError {
    #[error("empty input")]
    EmptyInput,

    #[error("input too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid half spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("unknown {kind} `{value}`")]
    UnknownVariant { kind: &'static str, value: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("solver exceeded {0} steps")]
    MaxStepsExceeded(usize),

    #[error("step size underflow at t={t} (h={h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<FodeModel>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FodeError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        FodeError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
