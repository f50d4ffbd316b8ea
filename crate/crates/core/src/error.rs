use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The requested stencil exceeds the configured combined-order ceiling.
    /// Lower the observation window or coarsen the mesh.
    #[error("stencil order overflow: derivative {derivative} + accuracy {accuracy} exceeds {max}")]
    OrderOverflow {
        derivative: usize,
        accuracy: usize,
        max: usize,
    },

    #[error("invalid stencil order: {0}")]
    InvalidOrder(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    /// Every potential derivative at the slice vanishes; the constraint
    /// system carries no information.
    #[error("unmeasurable slice at x index {0}")]
    Unmeasurable(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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
