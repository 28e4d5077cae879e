//! Crate-wide error type with the exit-code mapping used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown subtask, unresolved key, invalid value.
    #[error("config error: {0}")]
    Config(String),

    /// Input violates an operation precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// An instruction noun could not be resolved against the scene.
    #[error("grounding error: could not resolve {noun:?} in {context}")]
    Grounding { noun: String, context: String },

    /// Point sampling failed (e.g. empty mask).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Dataset/stage mismatch or a stage invoked out of order.
    #[error("stage error: {0}")]
    Stage(String),

    /// Scripted expert failed to solve a pathological seed; the episode is
    /// excluded and counted, never silently kept.
    #[error("expert failure: {0}")]
    Expert(String),

    /// Non-finite values encountered during numeric work.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Artifact was produced by an incompatible pipeline/env/model version.
    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    /// Malformed container or sidecar file.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 0 success, 2 validation, 3 numeric, 4 version mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::VersionMismatch(_) => 4,
            _ => 2,
        }
    }
}
