//! Error types shared across the core crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A physical parameter violates its validity constraint.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// The requested hover trim is outside the thrust curve's range.
    #[error("infeasible trim: required per-motor thrust {required:.4} N exceeds maximum {max:.4} N")]
    InfeasibleTrim { required: f64, max: f64 },

    /// A state or derivative component became non-finite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Simulation configuration violates a structural invariant.
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    /// The state history ring does not yet cover the estimate delay.
    #[error("insufficient history: need {needed} past states, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    /// Key-value config parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Flight-log parse or schema failure.
    #[error("flight log error: {0}")]
    FlightLog(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite {
            context: context.into(),
        }
    }
}
