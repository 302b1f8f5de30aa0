//! Error types shared across the library.

use thiserror::Error;

/// Library-wide error type.
///
/// Numerical routines return structured errors naming the offending quantity
/// (row, column, group) wherever a failure has one, so callers can report
/// actionable diagnostics instead of a bare "matrix not PD".
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("loss overflow at row {row}: linear predictor {theta} out of range for {model}")]
    LossOverflow {
        row: usize,
        theta: f64,
        model: &'static str,
    },

    #[error("{what} is rank deficient: {detail}")]
    RankDeficient { what: String, detail: String },

    #[error("{what} is not positive definite: {detail}")]
    NotPositiveDefinite { what: String, detail: String },

    #[error("separation detected in restricted fit: coefficient norm {norm:.3e} exceeded guard {guard:.1e}")]
    Separation { norm: f64, guard: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("not enough degrees of freedom: n = {n}, fitted columns = {fitted}")]
    DegreesOfFreedom { n: usize, fitted: usize },

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("nothing selected: the active set is empty, no inference is possible")]
    NothingSelected,

    #[error("barrier domain violation: component {index} = {value:.3e} is not above c = {c}")]
    BarrierDomain { index: usize, value: f64, c: f64 },

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization failure: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
