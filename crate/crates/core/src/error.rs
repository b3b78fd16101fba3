use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform; names the operation and offending axis.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    /// A shape that is invalid for the operation as a whole (rank, element count, ...).
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Misuse of an API contract (e.g. backward from a non-scalar root).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Format(#[from] crate::raster::FormatError),

    #[error("training diverged at step {step}: non-finite loss")]
    NonFinite {
        step: u64,
        last_finite: Option<crate::heads::LossReport>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
