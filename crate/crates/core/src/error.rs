use thiserror::Error;

/// Errors raised across the planner, estimator and simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate linearization reference: {0}")]
    DegenerateReference(String),

    #[error("ill-conditioned covariance at step {step}: {detail}")]
    Conditioning { step: usize, detail: String },

    #[error("training protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("flatness singularity: {0}")]
    FlatnessSingularity(String),

    #[error("integration failure at t = {time:.4} s: {detail}")]
    IntegrationFailure { time: f64, detail: String },

    #[error("problem is infeasible ({0})")]
    Infeasible(String),

    #[error("solver backend: {0}")]
    Backend(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
