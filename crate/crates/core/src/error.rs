use thiserror::Error;

use crate::adjoint::Primitive;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("batch size must be at least {min}, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("grid window {window:.3e} m is smaller than 6 x beam radius {radius:.3e} m for {mode}")]
    WindowTooSmall {
        mode: String,
        window: f64,
        radius: f64,
    },

    #[error("pump coefficients are all zero")]
    AllZeroPump,

    #[error("non-finite field value encountered{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteField { step: Option<usize> },

    #[error("primitive `{0:?}` has no registered adjoint")]
    UnsupportedPrimitive(Primitive),

    #[error("two-photon probability is degenerate (sum of raw entries {0:e} <= 0)")]
    DegenerateP(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mode {0} is not in the basis")]
    ModeNotInBasis(String),

    #[error("energy conservation violated: 1/lp - 1/ls - 1/li = {0:e} 1/m")]
    EnergyConservation(f64),

    #[error("poling export: {0}")]
    Poling(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
