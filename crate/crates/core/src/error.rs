use thiserror::Error;

#[derive(Debug, Error)]
pub enum HotaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at tape node {node} ({op})")]
    NonFiniteNode { node: usize, op: &'static str },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: {reason}{}", .last_metrics.as_ref().map(|m| format!(" (last finite metrics: {m})")).unwrap_or_default())]
    Diverged {
        step: usize,
        reason: String,
        /// JSON of the last completed metrics row.
        last_metrics: Option<String>,
    },

    #[error("architecture mismatch: {expected} vs {got}")]
    ArchMismatch { expected: String, got: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HotaError> = std::result::Result<T, E>;
