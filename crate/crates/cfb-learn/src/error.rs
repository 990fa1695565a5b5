//! Error types for the learning crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("tensor {tensor}: expected shape {expected:?}, got {got:?}")]
    DimMismatchTensor {
        tensor: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("policy file error: {0}")]
    File(String),

    #[error("invalid task or trainer config: {0}")]
    InvalidConfig(String),

    #[error("episode is terminal; reset before stepping")]
    TerminalEpisode,

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] cfb_core::CoreError),
}
