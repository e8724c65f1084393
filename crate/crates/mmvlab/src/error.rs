use thiserror::Error;

/// Crate-wide error type. Violations of model assumptions found during
/// validation are *data* (see [`crate::model::ValidationReport`]), not errors;
/// this enum covers faults that abort a computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate volatility: {0}")]
    Degenerate(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("non-finite state: {0}")]
    NonFiniteState(String),

    #[error("negative retention requested (q = {q}) at step {k}")]
    NegativeRetention { k: usize, q: f64 },

    #[error("jump generator psi must stay >= -1 + eps (got {psi})")]
    PsiBelowMinusOne { psi: f64 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("quadrature did not converge after {refinements} refinements")]
    QuadratureNonConvergence { refinements: usize },

    #[error("regression design ill-conditioned: cond = {cond:.3e} exceeds cap {cap:.3e}")]
    RegressionIllConditioned { cond: f64, cap: f64 },

    #[error("h process fell below its floor: min h = {min_h:.3e} < floor {floor:.3e}")]
    FloorViolation { min_h: f64, floor: f64 },

    #[error("control volatility matrix D is singular")]
    SingularD,

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("degenerate market: Y_0 = {y0} is too close to 1, dual problem is unbounded")]
    DegenerateMarket { y0: f64 },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
}

impl Error {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
