use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("divergence undefined: p[{index}] = {p} > 0 but q[{index}] = 0")]
    DivergenceUndefined { index: usize, p: f64 },

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("layout conflict: {0}")]
    LayoutConflict(String),

    #[error("diagnostic undefined: {0}")]
    DiagnosticUndefined(String),

    #[error("correction failed: {0}")]
    CorrectionFailed(String),

    #[error("corrector contract violated: {0}")]
    ContractViolation(String),

    #[error("scoring failed for candidate {index}: {reason}")]
    ScoringFailed { index: usize, reason: String },

    #[error("selection failed: {0}")]
    SelectionFailed(String),

    #[error("run failed at step {step}: {reason}")]
    RunFailed { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
