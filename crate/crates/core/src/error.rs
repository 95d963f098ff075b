use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("no finite logit: distribution has empty support")]
    EmptySupport,

    #[error("invalid support: {0}")]
    InvalidSupport(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("drafter proposed token {token} at position {position} with zero draft probability")]
    DrafterSupportViolation { position: usize, token: u32 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("infinite KL: target puts mass {mass:e} on token {token} outside the draft support")]
    InfiniteKl { token: u32, mass: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LabError::EmptySupport
                | LabError::DrafterSupportViolation { .. }
                | LabError::Numerical(_)
                | LabError::DivisionByZero(_)
                | LabError::InfiniteKl { .. }
        )
    }

    pub(crate) fn dims(what: &'static str, expected: usize, got: usize) -> Self {
        LabError::DimensionMismatch { what, expected, got }
    }
}
