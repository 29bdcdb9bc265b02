use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("{path}: invalid transforms file: {reason}")]
    Transforms { path: PathBuf, reason: String },

    #[error("{path}:{line}: malformed label line: {reason}")]
    Label { path: PathBuf, line: usize, reason: String },

    #[error("frame {frame}: pose is not a rotation (orthonormality error {error:.3e}, det {det:.6})")]
    Pose { frame: usize, error: f64, det: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("no supervision: every pixel of every view lies inside a bounding box")]
    NoSupervision,

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 1 usage, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) => 1,
            Error::NonFinite { .. } | Error::NoSupervision => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
