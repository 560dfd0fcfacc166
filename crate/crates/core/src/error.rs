use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Validation,
    /// Input data is missing, malformed or inconsistent.
    Data,
    /// Anything else (I/O, serialization, bugs).
    Internal,
}

impl ErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Data => "data",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown sample id `{0}`")]
    UnknownSample(String),

    #[error("unknown subject id `{0}`")]
    UnknownSubject(String),

    #[error("duplicate timepoint {time} for subject `{subject}`")]
    DuplicateTimepoint { subject: String, time: f64 },

    #[error("non-numeric cell `{value}` in {file} (row `{row}`, column `{column}`)")]
    NonNumeric {
        file: String,
        row: String,
        column: String,
        value: String,
    },

    #[error("malformed table {file}: {reason}")]
    MalformedTable { file: String, reason: String },

    #[error("subject `{subject}`: {reason}")]
    InsufficientHistory { subject: String, reason: String },

    #[error("{0}")]
    Data(String),

    #[error("scale mismatch: {0}")]
    Scale(String),

    #[error("no taxon is positive in every sample; filter rare taxa first")]
    NoPositiveTaxon,

    #[error("feature width mismatch: model expects {expected}, got {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("unsupported format version {0}")]
    Version(u32),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Scale(_) | Error::WidthMismatch { .. } => {
                ErrorKind::Validation
            }
            Error::UnknownSample(_)
            | Error::UnknownSubject(_)
            | Error::DuplicateTimepoint { .. }
            | Error::NonNumeric { .. }
            | Error::MalformedTable { .. }
            | Error::InsufficientHistory { .. }
            | Error::NoPositiveTaxon
            | Error::Data(_)
            | Error::NonFinite(_) => ErrorKind::Data,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorKind::Data,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::Version(_) => {
                ErrorKind::Internal
            }
        }
    }

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
