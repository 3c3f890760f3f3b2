use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("point {0:?} lies outside the domain")]
    Domain(Vec<f64>),
    #[error("system is not solvable: {0}")]
    Solvability(String),
    #[error("iterative solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("eigen-solver did not converge for a {0}x{0} tensor")]
    Eigen(usize),
    #[error("integration failed at step {step}: {reason}")]
    Integration { step: usize, reason: String },
    #[error("time step underflow at step {step} (dt = {dt:e})")]
    DtUnderflow { step: usize, dt: f64 },
    #[error("step rejected: {reason} (suggested dt {suggested_dt:e})")]
    StepRejected { reason: String, suggested_dt: f64 },
    #[error("no stationary branch for atom {atom}: {reason}")]
    NoBranch { atom: usize, reason: String },
    #[error("line search failed after {iterations} iterations (gradient norm {residual:e})")]
    LineSearch { iterations: usize, residual: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
