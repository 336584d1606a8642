use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("galerkin level {level} exceeds basis capacity {capacity}")]
    Level { level: usize, capacity: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("newton iteration failed to converge at step {step} (residual {residual:.3e})")]
    StepFailure { step: usize, residual: f64 },

    #[error("non-finite state encountered at step {step}")]
    Divergence { step: usize },

    #[error("epsilon {epsilon} exceeds the declared noise guard {guard}")]
    NoiseGuard { epsilon: f64, guard: f64 },

    #[error("control energy budget exceeded: {used} > {budget}")]
    Budget { used: f64, budget: f64 },

    #[error("control grid too coarse: {points_per_period:.2} points per period (need at least 8)")]
    Resolution { points_per_period: f64 },

    #[error("insufficient data: {usable} usable cells, need at least {required}")]
    InsufficientData { usable: usize, required: usize },

    #[error("{0}")]
    Domain(String),
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
