use std::path::PathBuf;

use seffsal_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A caller broke an operation's precondition (shapes, sizes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    /// A map was read before the pass that produces it ran.
    #[error("wiring error: {0}")]
    Sequencing(String),

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("ground truth has no foreground pixels")]
    EmptyGroundTruth,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{0}")]
    Load(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint architecture mismatch (format v{version}): {detail}")]
    ArchitectureMismatch { version: u32, detail: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: non-finite loss from {head}")]
    Diverged {
        epoch: usize,
        iteration: usize,
        head: String,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
