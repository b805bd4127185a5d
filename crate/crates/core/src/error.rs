use thiserror::Error;

/// Errors produced anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("model rejected: {0}")]
    ModelRejected(String),

    #[error("block partition violates the separability rules: {0}")]
    PartitionInvalid(String),

    #[error("yaw is underdetermined: horizontal baseline has squared norm {0:e}")]
    UnderdeterminedYaw(f64),

    #[error("point registration is degenerate: {0}")]
    DegenerateRegistration(String),

    #[error("internal solver error: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
