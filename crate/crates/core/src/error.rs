use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, widths, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward value became NaN or infinite.
    #[error("numeric overflow in `{op}` (node {node})")]
    NumericOverflow { op: &'static str, node: usize },

    /// Zero-norm vector fed to a cosine classifier.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset} ({field}): {reason}")]
    Format {
        offset: u64,
        field: &'static str,
        reason: String,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("incompatible checkpoint and dataset: {0}")]
    Compatibility(String),

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
