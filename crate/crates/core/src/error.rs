//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON. `offset` is the byte offset into the input.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema error in record {index}: field `{field}` {problem}")]
    Schema {
        index: usize,
        field: String,
        problem: String,
    },

    #[error("expected {expected} answers, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("annotations reference unknown question ids: {missing:?}")]
    Join { missing: Vec<u64> },

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("image {0} not found in feature store")]
    ImageNotFound(u64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} out of range for {classes} answer classes")]
    Label { label: usize, classes: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(index: usize, field: &str, problem: impl Into<String>) -> Self {
        Error::Schema {
            index,
            field: field.to_string(),
            problem: problem.into(),
        }
    }

    /// Builds a [`Error::Parse`] from a serde_json error, converting its
    /// line/column position into a byte offset within `input`.
    pub(crate) fn from_json(err: &serde_json::Error, input: &str) -> Self {
        let offset = byte_offset(input, err.line(), err.column());
        Error::Parse {
            offset,
            message: err.to_string(),
        }
    }
}

fn byte_offset(input: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = input
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(input.len())
}
