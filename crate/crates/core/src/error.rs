use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid control vector: {0}")]
    InvalidControl(String),

    #[error("duplicate id `{id}`{}", line_suffix(*.line))]
    DuplicateId { id: String, line: Option<usize> },

    #[error("dimension mismatch: expected {expected}, found {found}{}", line_suffix(*.line))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        line: Option<usize>,
    },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("embedding dimension {0} is too small (need at least 3)")]
    DimensionTooSmall(usize),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("backend error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend {
        status: Option<u16>,
        message: String,
    },

    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("record `{id}` (line {line}) has no label but is required to")]
    MissingLabel { id: String, line: usize },

    #[error("length mismatch: {left} labels vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("value {0} outside [0, 1]")]
    Range(f64),

    #[error("only one class present (positives: {positives}, negatives: {negatives})")]
    OneClassOnly { positives: u64, negatives: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn backend(status: Option<u16>, message: impl Into<String>) -> Self {
        Error::Backend {
            status,
            message: message.into(),
        }
    }

    /// True for errors caused by bad input files or configuration rather
    /// than by a failing run. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schema { .. }
                | Error::DuplicateId { .. }
                | Error::DimensionMismatch { line: Some(_), .. }
                | Error::MissingLabel { .. }
        )
    }
}
