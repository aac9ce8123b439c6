use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("retraction produced a zero column at index {column} (step too large)")]
    ZeroColumn { column: usize },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("not enough valid patch positions: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("validity mask has no measured entries")]
    NoValidMeasurements,

    #[error("bad magic: expected \"JIDO\"")]
    BadMagic,

    #[error("unsupported operator file version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed operator file: {0}")]
    Malformed(String),

    #[error("{operator} operator row {row} has norm {norm}, expected 1")]
    RowNorm {
        operator: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::ZeroColumn { .. } | Error::NonFinite { .. } | Error::Singular(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
