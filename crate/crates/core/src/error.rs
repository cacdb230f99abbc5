use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimator, the simulator and the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The rotation angle is too close to π for the logarithm to have a
    /// unique axis.
    #[error("rotation logarithm is ambiguous at angle {0} rad")]
    AmbiguousLog(f64),

    #[error("innovation covariance is not invertible")]
    SingularUpdate,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("anchor {0} is not initialized")]
    AnchorUninitialized(usize),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("feature track rejected: {0}")]
    TrackRejected(String),

    #[error("anchor initialization deferred: {0}")]
    InitDeferred(String),

    #[error("trajectory alignment failed: {0}")]
    Alignment(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
