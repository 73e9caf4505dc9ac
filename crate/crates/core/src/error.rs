use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The precision `Σ_p⁻¹ − 2βG_aa` failed its Cholesky factorization.
    #[error("posterior precision is not positive definite ({context}); beta too large for the prior/G curvature")]
    NotPositiveDefinite { context: &'static str },

    #[error("backward pass failed at t={t}: {source}")]
    BackwardPass { t: usize, source: Box<Error> },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("division domain violated for asset {asset}: x + u = {value}")]
    Domain { asset: usize, value: f64 },

    #[error("mean level undefined for asset {asset}: mu*phi*(1+phi) = 0")]
    UndefinedLevel { asset: usize },

    #[error("mu = 0 or phi = 0 requested; use the log-normal model (GmrParams::lognormal_limit)")]
    LogNormalLimit,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} outside usable range 0..{len} of {what}")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("EM failed at iteration {iteration}: {source}")]
    Em { iteration: usize, source: Box<Error> },

    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
