use thiserror::Error;

use crate::estimation::FitResult;

pub type Result<T> = std::result::Result<T, MfaError>;

#[derive(Debug, Error)]
pub enum MfaError {
    #[error("invalid channel structure: {0}")]
    InvalidStructure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("structural zero violated: {what} = {value:e}")]
    ConstraintViolation { what: String, value: f64 },

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("model covariance is not positive definite")]
    NonPd,

    #[error("condition 2 enumeration needs about {needed} reduction tuples, above the cap of {cap}")]
    Infeasible { needed: u128, cap: u128 },

    #[error("none of the {starts} starts converged (best objective {:.6e})", best.objective)]
    AllStartsFailed { starts: usize, best: Box<FitResult> },

    #[error("hessian V0 is singular (lambda_min = {min:e}, lambda_max = {max:e}); the model is not locally identified here")]
    SingularHessian { min: f64, max: f64 },

    #[error("reference vector has zero norm")]
    ZeroNorm,

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
