use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("feature `{0}` has zero standard deviation")]
    DegenerateScale(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix not positive definite after jitter {jitter:e} (smallest eigenvalue estimate {min_eigenvalue:e})")]
    Conditioning { jitter: f64, min_eigenvalue: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("join error: id {0} not found in both inputs")]
    Join(i64),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingColumn(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Invalid(_)
            | Error::DegenerateScale(_)
            | Error::Shape(_)
            | Error::UndefinedMetric(_)
            | Error::Join(_)
            | Error::Version { .. }
            | Error::Checkpoint(_)
            | Error::Config(_) => 2,
            Error::NonFinite(_) | Error::Conditioning { .. } | Error::FitFailure(_) => 3,
            Error::Csv(e) if !e.is_io_error() => 2,
            Error::Io { .. } | Error::Csv(_) => 4,
        }
    }
}
