use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum CtfaError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero channel: water-filling is undefined for a rank-0 channel")]
    ZeroChannel,
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),
    #[error("infeasible linear path: {0}")]
    InfeasibleLinearPath(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("infeasible warm start: {0}")]
    InfeasibleWarmStart(String),
    #[error("config error at {key}: {msg}")]
    Config { key: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CtfaError>;
