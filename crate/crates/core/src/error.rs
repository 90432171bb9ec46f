use thiserror::Error;

/// Errors raised by estimation, testing and ingestion routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no observation falls inside the kernel window centred at t={t} (bandwidth {bandwidth})")]
    EmptyWindow { t: usize, bandwidth: f64 },

    #[error("time index {t} out of range: regressors need t > p = {p} and t <= T = {t_len}")]
    IndexOutOfRange { t: usize, p: usize, t_len: usize },

    #[error("contraction violated at u={u:.4}: sum of lag coefficients is {sum:.6}")]
    ContractionViolated { u: f64, sum: f64 },

    #[error("intercept function is not positive at u={u:.4} (value {value})")]
    NonPositiveIntercept { u: f64, value: f64 },

    #[error("lag coefficient a_{lag} is negative at u={u:.4} (value {value})")]
    NegativeCoefficient { lag: usize, u: f64, value: f64 },

    #[error("invalid coefficient partition: {0}")]
    InvalidPartition(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate series: the mean of the squared observations is zero")]
    DegenerateSeries,

    #[error("smoothed moment matrix is singular at t={t} (reciprocal condition {rcond:.3e})")]
    SingularSmoothedMoment { t: usize, rcond: f64 },

    #[error("weighted least-squares design is singular (reciprocal condition {rcond:.3e})")]
    SingularDesign { rcond: f64 },

    #[error("estimated covariance matrix is singular")]
    SingularCovariance,

    #[error("fitted volatility is not positive at t={t}")]
    NonPositiveVolatility { t: usize },

    #[error("every bandwidth on the grid produced a singular fit")]
    AllSingular,

    #[error("Monte-Carlo replicate {replicate} failed after {attempts} draws: {source}")]
    ReplicateFailure {
        replicate: usize,
        attempts: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-positive price {value} at line {line}")]
    NonPositivePrice { line: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numerics (singular systems, empty
    /// windows) rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EmptyWindow { .. }
                | Error::SingularSmoothedMoment { .. }
                | Error::SingularDesign { .. }
                | Error::SingularCovariance
                | Error::NonPositiveVolatility { .. }
                | Error::AllSingular
                | Error::ReplicateFailure { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
