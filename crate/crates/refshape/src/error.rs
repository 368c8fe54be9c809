//! Crate-wide error type. Variants map onto the failure classes surfaced by
//! the public API: malformed input files, structurally invalid data, bad
//! arguments, calls in the wrong state, and numerical breakdown.

/// Any error produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be parsed (PLY, JSON, checkpoint, config).
    #[error("parse error: {0}")]
    Parse(String),
    /// Data is structurally invalid (indices out of range, label mismatch,
    /// non-manifold connectivity, inconsistent sizes).
    #[error("validation error: {0}")]
    Validation(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A call arrived in the wrong state (e.g. stepping an optimizer whose
    /// gradients were never populated).
    #[error("state error: {0}")]
    State(String),
    /// A computation broke down numerically (non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A checkpoint file is corrupt, truncated, or version-mismatched.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that indicate misuse of the command line rather than
    /// a runtime failure; the CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Argument(_))
    }
}
