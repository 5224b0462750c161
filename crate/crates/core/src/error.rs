use std::io;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the CLI exit codes: usage and configuration
/// problems exit with 2, file and format problems with 3, numerical aborts
/// with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Non-finite value or barrier overflow during a forward/backward pass.
    #[error("numerical exception at {site}")]
    Numerical { site: String },

    #[error("training diverged in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Shape(_) | Error::Calibration(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Csv(_) => 3,
            Error::Numerical { .. } | Error::Divergence { .. } => 4,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
