use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("enumeration exceeded the cap of {cap} schedules")]
    ResourceLimit { cap: usize },

    #[error("workload is infeasible: {0}")]
    InfeasibleWorkload(String),

    #[error("job type {job_type} can never be served by any schedule")]
    UnservableType { job_type: usize },

    #[error("linear system is singular (pivot {pivot:e} below tolerance)")]
    Singular { pivot: f64 },

    #[error("linear program is infeasible")]
    LpInfeasible,

    #[error("linear program is unbounded")]
    LpUnbounded,

    #[error("markov chain is reducible: {0}")]
    ReducibleChain(String),

    #[error("job type {job_type} is unstable (rho = {rho})")]
    UnstableType { job_type: usize, rho: f64 },

    #[error("job type {job_type} is never served by the modulating process")]
    TypeNeverServed { job_type: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
