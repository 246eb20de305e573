use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// I/O, data validation and configuration problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("record `{record}`: bad header magic in {path}")]
    BadMagic { record: String, path: PathBuf },
    #[error("unsupported format version in {path}: {detail}")]
    Version { path: PathBuf, detail: String },
    #[error("record `{record}`: dimension mismatch: {detail}")]
    DimensionMismatch { record: String, detail: String },
    #[error("record `{record}`: truncated data: {detail}")]
    Truncated { record: String, detail: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{record}`: {detail}")]
    Invariant { record: String, detail: String },
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario {scenario}: {detail}")]
    LabelRequirement { scenario: String, detail: String },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(record: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            record: record.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invariant(record: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Invariant {
            record: record.into(),
            detail: detail.into(),
        }
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Csv { .. } | Error::MissingManifest(_) => ErrorKind::Io,
            Error::Config(_) => ErrorKind::Usage,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Validation,
    Io,
}

pub type Result<T> = std::result::Result<T, Error>;
