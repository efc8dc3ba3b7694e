use thiserror::Error;

/// Errors surfaced by every module in the crate.
#[derive(Debug, Error)]
pub enum DrError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("series too short: need at least {required} steps, have {actual}")]
    SeriesTooShort { required: usize, actual: usize },

    #[error("no valid windows in the {0} split")]
    NoValidWindows(&'static str),

    #[error("training diverged at epoch {epoch}: {part} became non-finite")]
    Diverged { epoch: usize, part: &'static str },

    #[error("anchor {anchor} is infeasible: {reason}")]
    InfeasibleAnchor { anchor: usize, reason: String },

    #[error("non-stationary residual process: spectral radius {radius:.6} >= 1")]
    NonStationary { radius: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("insufficient samples for lag {lag}: {count} pairs (need at least {required})")]
    InsufficientSamples {
        lag: usize,
        count: usize,
        required: usize,
    },

    #[error("empty correlation report")]
    EmptyReport,

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("ragged row at line {line}: expected {expected} fields, got {got}")]
    RaggedRow {
        line: usize,
        expected: usize,
        got: usize,
    },

    #[error("timestamps not strictly increasing at line {line}")]
    NonMonotoneTimestamp { line: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DrError {
    pub(crate) fn dims(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        DrError::DimensionMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn parse(line: usize, column: usize, message: impl Into<String>) -> Self {
        DrError::Parse {
            line,
            column,
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            DrError::Config(_)
                | DrError::Parse { .. }
                | DrError::RaggedRow { .. }
                | DrError::NonMonotoneTimestamp { .. }
                | DrError::NonStationary { .. }
                | DrError::SeriesTooShort { .. }
                | DrError::DimensionMismatch { .. }
                | DrError::Csv(_)
                | DrError::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DrError>;
