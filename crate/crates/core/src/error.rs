use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-mask: mask has no set pixels")]
    EmptyMask,

    #[error("invalid area {index}: {reason}")]
    InvalidArea { index: usize, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient tape does not belong to these parameters")]
    StaleTape,

    #[error("singular homography (|det| = {0:e})")]
    SingularHomography(f64),

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(context: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}
