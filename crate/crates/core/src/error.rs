use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate vector (norm {norm:e} below 1e-12)")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("missing instruction for record {0}")]
    MissingInstruction(String),

    #[error("unknown loss `{0}`")]
    UnknownLoss(String),

    #[error("dataset failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<Violation>),

    #[error("training diverged at step {step}: loss = {value}")]
    Diverged { step: usize, value: f64 },

    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported version {found} in {path} (expected 1)")]
    VersionMismatch { path: PathBuf, found: u16 },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unresolvable reference {file}#{row} in record {record}")]
    BadReference {
        record: String,
        file: String,
        row: usize,
    },
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface: 1 for anything the
    /// input data is to blame for, 2 for filesystem and format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Json { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedPayload { .. } => 2,
            _ => 1,
        }
    }
}
