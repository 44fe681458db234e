//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or operator shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A class index outside the valid range.
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A tape was reused after its backward pass consumed it.
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    /// Filesystem failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file, with the byte offset of the problem.
    #[error("{path}: byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// No candidate anchors overlap any ground truth in the whole dataset.
    #[error("no candidate anchors (prior IoU > 0.5) found in the dataset")]
    NoCandidates,

    /// Bad key=value configuration input.
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
