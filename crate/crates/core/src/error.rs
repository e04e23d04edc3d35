use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} is out of range for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("image has no observed pixels; cannot build an empty graph")]
    EmptyGraph,
    #[error("patch of size {size} does not fit in a {height}x{width} image")]
    PatchOutOfBounds {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("coordinate ({row}, {col}) lies outside a {height}x{width} grid")]
    CoordOutOfBounds {
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },
    #[error("selected region is empty")]
    EmptyRegion,
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch of size {0} is too small for batch statistics")]
    BatchTooSmall(usize),
    #[error("basis matrix is singular")]
    SingularBasis,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("imputer has not been fitted")]
    Unfitted,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
