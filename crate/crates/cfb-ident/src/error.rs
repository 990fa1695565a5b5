//! Error types for identification and replay.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("log error: {0}")]
    Log(String),

    /// Constant-command logs cannot pin down the motor gain.
    #[error("unidentifiable motor gain: the command trace has no excitation")]
    UnidentifiableGain,

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    /// The search bracket does not contain the objective's minimum.
    #[error("bracket [{lo}, {hi}] excludes the minimizer; widen the bracket")]
    BracketExcludesMinimum { lo: f64, hi: f64 },

    /// The objective does not vary over the bracket (no excitation).
    #[error("flat objective over the bracket: the log has no usable excitation")]
    FlatObjective,

    #[error("replay error: {0}")]
    Replay(String),

    #[error(transparent)]
    Core(#[from] cfb_core::CoreError),
}
