use thiserror::Error;

/// Failures surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} failed after jitter)")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },
    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("integration failed: {0}")]
    IntegrationFailure(String),
    #[error("unsupported Sobol dimension {dims} (maximum {max})")]
    UnsupportedDimension { dims: usize, max: usize },
    #[error("bisection bracket does not change sign (h(a) = {h_lo}, h(b) = {h_hi})")]
    InvalidBracket { h_lo: f64, h_hi: f64 },
    #[error("every multistart failed")]
    AllStartsFailed,
    #[error("optimal control problem failed: {0}")]
    OcpFailed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}
