//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (shape mismatch,
    /// non-positive variance, empty input, out-of-range parameter).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric invariant broke at runtime (non-finite activation,
    /// diverged loss, singular matrix).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file had the wrong magic, version, or framing.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
