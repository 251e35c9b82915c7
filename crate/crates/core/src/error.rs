//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    #[error("unknown parameter name: {0}")]
    UnknownParam(String),

    #[error("optimizer step without populated gradients")]
    MissingGradients,

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad idx file {path}: {reason}")]
    BadIdx { path: String, reason: String },

    #[error("image too narrow to split: width {0} < 2")]
    TooNarrow(usize),

    #[error("joint table is not normalized (sums to {0})")]
    UnnormalizedTable(f64),

    #[error("code index {index} out of range for {bits}-bit fields")]
    IndexOutOfRange { index: u16, bits: u32 },

    #[error("byte string too short: need {need} bytes, got {got}")]
    TruncatedBytes { need: usize, got: usize },

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
