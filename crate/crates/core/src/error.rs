use thiserror::Error;

use crate::sim::Sample;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("chain length {n} outside supported range [{min}, {max}]")]
    ChainLength { n: usize, min: usize, max: usize },

    #[error("gain overflow: gamma = {gamma:e} gives gamma^{power} beyond {limit:e}")]
    GainOverflow { gamma: f64, power: i32, limit: f64 },

    #[error("singular gain at t = {t}, gamma = {gamma:e}")]
    Singularity { t: f64, gamma: f64 },

    #[error("numerical failure in {stage}: residual {residual:e}")]
    Numerical { stage: &'static str, residual: f64 },

    #[error("uncertainty '{label}': {msg}")]
    Uncertainty { label: String, msg: String },

    #[error("assumption violated by '{label}' at t = {t}: slack {slack:e} in row {row}")]
    AssumptionViolated { label: String, t: f64, row: usize, slack: f64 },

    #[error("gain {beta} below admissible value {minimum}")]
    GainBelowFormula { beta: f64, minimum: f64 },

    #[error("simulation diverged at t = {t}")]
    Diverged { t: f64, last_good: Option<Box<Sample>> },

    #[error("step budget of {steps} exhausted at t = {t}")]
    StepBudget { steps: usize, t: f64 },

    #[error("invalid integrator config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;
