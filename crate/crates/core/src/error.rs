use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NodfError>;

#[derive(Debug, Error)]
pub enum NodfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("ill-conditioned system: {reason} (condition estimate {condition:.3e})")]
    IllConditioned { reason: String, condition: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("all {0} hyperparameter evaluations failed")]
    AllEvaluationsFailed(usize),

    #[error("dataset schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("dataset component missing: {}", .0.display())]
    MissingComponent(PathBuf),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(NodfError::InvalidArgument(msg.into()))
}
