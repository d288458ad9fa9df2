use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteerError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("Cholesky factorization failed: {0}")]
    CholeskyFailure(String),
    #[error("matrix square root failed: {0}")]
    MatrixSqrtFailure(String),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("EM component {0} degenerated")]
    DegenerateComponent(usize),
    #[error("transport marginals disagree: total mass {0} vs {1}")]
    InfeasibleMarginals(f64, f64),
    #[error("controllability Grammian is singular")]
    SingularGrammian,
    #[error("singular value decomposition did not converge")]
    SvdFailure,
    #[error("conic solver failed ({status}): {detail}")]
    SolverFailure { status: String, detail: String },
    #[error("inconsistent policy: {0}")]
    InconsistentPolicy(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("block coordinate descent hit the iteration limit")]
    MaxIterExceeded,
    #[error("no feasible starting point found: {0}")]
    InfeasibleStart(String),
    #[error("feedback recovery failed: {0}")]
    RecoveryFailure(String),
    #[error("step covariance at k = {0} is singular")]
    SingularStepCovariance(usize),
    #[error("push-forward map of block ({0}, {1}) is singular")]
    SingularPushforward(usize, usize),
}

pub type Result<T> = std::result::Result<T, SteerError>;

pub(crate) fn dim_err(what: impl Into<String>) -> SteerError {
    SteerError::DimensionMismatch(what.into())
}
