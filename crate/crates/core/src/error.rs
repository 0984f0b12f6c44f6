use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument had the wrong shape or was otherwise unusable.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A configuration value violated its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Precision/recall is undefined without positive ground truth.
    #[error("average precision is undefined: ground truth has no positive pixels")]
    UndefinedAp,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but its contents are malformed.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
