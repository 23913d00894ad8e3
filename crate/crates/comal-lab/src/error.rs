//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("backward expects a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this loss; reset gradients first")]
    BackwardTwice,

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("all pixels ignored; no labeled pixel to average over")]
    AllPixelsIgnored,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing inputs: {0:?}")]
    MissingInputs(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
