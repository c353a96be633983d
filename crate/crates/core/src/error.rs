use std::path::PathBuf;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds positional capacity {capacity}")]
    Capacity { len: usize, capacity: usize },

    #[error("temporal fusion needs at least {k} frames but got {len}; reduce the hierarchy depth")]
    TooShort { len: usize, k: usize },

    #[error("{path}: {message} at byte {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint incompatible with configuration: {0}")]
    Incompatible(String),

    #[error("training diverged at epoch {epoch}, video `{video}`: {reason}")]
    Divergence {
        epoch: usize,
        video: String,
        reason: String,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("causality violated at timestep {timestep}")]
    Causality { timestep: usize },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{path}: {source}")]
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

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
