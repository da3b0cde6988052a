//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("sequence length {got} exceeds capacity {max}")]
    Capacity { got: usize, max: usize },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("empty {what}")]
    EmptySegment { what: &'static str },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("truncated tensor payload for '{tensor}': expected {expected} bytes, got {got}")]
    Truncated {
        tensor: String,
        expected: usize,
        got: usize,
    },

    #[error("unsupported format version {got} (supported: {supported})")]
    Version { got: u8, supported: u8 },

    #[error("train/eval corpora overlap on {count} scene ids (first: {first})")]
    CorpusOverlap { count: usize, first: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
