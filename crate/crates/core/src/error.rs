use thiserror::Error;

/// Errors raised by model construction, estimation and error estimation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaeError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("moment does not exist: nu = {nu} must exceed {bound}")]
    MomentDoesNotExist { nu: f64, bound: f64 },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("singular Sigma for area {area} (det = {det:e})")]
    SingularSigma { area: usize, det: f64 },

    #[error("singular U: information matrix is not positive definite")]
    SingularU,

    #[error("no convergence: best criterion {best_norm:e} after {starts} starts")]
    NoConvergence { best_norm: f64, starts: usize },

    #[error("fit is not converged")]
    UnconvergedFit,

    #[error("insufficient replications: {successes} succeeded, {required} required")]
    InsufficientReplications { successes: usize, required: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, SaeError>;
