use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation was called in the wrong lifecycle state (e.g. a step
    /// without gradients).
    #[error("invalid state: {0}")]
    State(String),

    /// Malformed or inconsistent data on disk or in a manifest.
    #[error("data error: {0}")]
    Data(String),

    #[error("no object matches the selector `{0}`")]
    NoMatch(String),

    #[error("cell {0} is already occupied")]
    CellOccupied(String),

    #[error("grid is full")]
    GridFull,

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration} (batch queries: {batch:?})")]
    NonFinite { iteration: usize, batch: Vec<usize> },

    /// An embedding norm crossed the divergence threshold.
    #[error("feature norm {norm:.3e} at iteration {iteration} exceeds the divergence limit")]
    Diverged { iteration: usize, norm: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
