use std::io;

use thiserror::Error;

/// Errors surfaced by the toolkit. Variants map onto the CLI exit codes
/// through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid design: {0}")]
    Design(String),

    #[error("no slot within tolerance of ({x}, {y})")]
    NoSlotWithinTolerance { x: f64, y: f64 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed:#018x})")]
    NonFinite { iteration: usize, batch_seed: u64 },

    #[error("oracle version mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 0 success, 1 usage, 2 I/O, 3 numeric failure, 4 version mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::VersionMismatch { .. } | Error::Architecture(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
