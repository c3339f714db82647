//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum VaddError {
    /// Caller violated a documented precondition (bad shapes, bad flags,
    /// missing input files). Maps to process exit code 2.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numerical invariant broke at runtime (NaN loss, non-finite
    /// parameter). Maps to process exit code 3; the trainer writes a
    /// diagnostic dump before surfacing this.
    #[error("numerical abort: {0}")]
    NonFinite(String),

    /// An oracle or verification check failed. Maps to process exit code 1.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VaddError>;

impl VaddError {
    /// Process exit code for the CLI: 0 success, 1 failed check,
    /// 2 usage error, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            VaddError::Usage(_) => 2,
            VaddError::NonFinite(_) => 3,
            VaddError::CheckFailed(_) => 1,
            VaddError::Io(_) | VaddError::Json(_) => 1,
        }
    }
}
