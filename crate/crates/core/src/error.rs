use ilearn_autodiff::AdError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] AdError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite cost {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    #[error("lower level not converged: |dL/dphi| = {grad_norm:e} > {tol:e}")]
    NotConverged { grad_norm: f64, tol: f64 },

    #[error("constraint violated at the lower-level solution: xi = {value:e} (tolerance {tol:e})")]
    ConstraintViolated { value: f64, tol: f64 },

    #[error("lower-level solution is not a KKT point: stationarity residual {residual:e}")]
    NotStationary { residual: f64 },

    #[error("singular constraint system: c H^-1 c^T = {value:e} (condition diagnostic {condition:e})")]
    SingularConstraint { value: f64, condition: f64 },

    #[error("training aborted at iteration {iteration}: {reason}")]
    Aborted { iteration: usize, history: Vec<f64>, reason: Box<Error> },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing input: {0}")]
    Missing(&'static str),

    #[error("no path from start to goal")]
    NoPath,

    #[error("divergent rollout: |x| = {norm:e} exceeds {bound:e} at step {step}")]
    Divergent { step: usize, norm: f64, bound: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
