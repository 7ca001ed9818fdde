//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = XblError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum XblError {
    /// An operation received inputs whose shapes it cannot combine.
    #[error("{op}: incompatible shapes {shapes}")]
    Dimension { op: &'static str, shapes: String },

    /// An operation produced a NaN or infinite value.
    #[error("{op}: non-finite value in output")]
    Numeric { op: &'static str },

    /// A caller broke a documented precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// A variable handle does not belong to the graph it was used with.
    #[error("graph error: {0}")]
    Graph(String),

    #[error("{what} out of range: {value} (valid: {valid})")]
    Range {
        what: &'static str,
        value: String,
        valid: String,
    },

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary or text file; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("data generation error: {0}")]
    Generation(String),

    #[error("exemplar selection error: {0}")]
    Selection(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl XblError {
    pub fn dim(op: &'static str, shapes: impl Into<String>) -> Self {
        XblError::Dimension {
            op,
            shapes: shapes.into(),
        }
    }

    pub fn range(what: &'static str, value: impl ToString, valid: impl Into<String>) -> Self {
        XblError::Range {
            what,
            value: value.to_string(),
            valid: valid.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XblError::Io {
            path: path.into(),
            source,
        }
    }
}
