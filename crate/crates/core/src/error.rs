use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid network: {0}")]
    InvalidNet(String),

    #[error("gradient tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot place {n_cells} cells of radius {radius} without overlap: {reason}")]
    InfeasiblePacking {
        n_cells: usize,
        radius: f64,
        reason: String,
    },

    #[error("degenerate collision between cells {a} and {b}: coincident centers")]
    DegenerateCollision { a: usize, b: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate record for frame {frame}, cell {cell_id}")]
    DuplicateKey { frame: u32, cell_id: u32 },

    #[error("no record for cell {cell_id} at frame {frame}")]
    UnknownCell { frame: u32, cell_id: u32 },

    #[error("numerical divergence at {context}")]
    Diverged { context: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}
