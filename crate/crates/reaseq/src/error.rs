//! One error type for the whole crate. Variants map to the failure classes
//! the pipeline distinguishes: bad shapes, bad config, malformed data, agent
//! trouble, and plain I/O.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch in a numeric kernel.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (caught before any work starts).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data: empty sequences, unknown ids, out-of-range
    /// indices, non-finite floats.
    #[error("data error: {0}")]
    Data(String),

    /// LLM agent failure that survived the repair round and retry budget.
    #[error("agent failure ({code}): {message}")]
    Agent { code: String, message: String },

    /// A persisted artifact does not parse or fails its header check.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn agent(code: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Agent {
            code: code.into(),
            message: message.into(),
        }
    }
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
