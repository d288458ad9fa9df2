use gmmsteer::SteerError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Validation(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Infeasible(_) => "infeasible",
            CliError::Solver(_) => "solver",
            CliError::Validation(_) => "validation",
        }
    }

    /// One-line JSON for stderr.
    pub fn report(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Report { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() }).unwrap_or_else(|_| self.to_string())
    }
}

impl From<SteerError> for CliError {
    fn from(e: SteerError) -> Self {
        let msg = e.to_string();
        match e {
            SteerError::InfeasibleStart(_) | SteerError::InfeasibleMarginals(..) => CliError::Infeasible(msg),
            SteerError::SolverFailure { .. }
            | SteerError::RecoveryFailure(_)
            | SteerError::MaxIterExceeded
            | SteerError::SvdFailure
            | SteerError::SingularStepCovariance(_)
            | SteerError::SingularPushforward(..)
            | SteerError::MatrixSqrtFailure(_)
            | SteerError::CholeskyFailure(_)
            | SteerError::DegenerateComponent(_) => CliError::Solver(msg),
            SteerError::DimensionMismatch(_)
            | SteerError::InvalidInput(_)
            | SteerError::NotSymmetric(_)
            | SteerError::SingularGrammian
            | SteerError::InconsistentPolicy(_)
            | SteerError::IndexOutOfRange(_) => CliError::Config(msg),
        }
    }
}

/// Library errors raised while reading user input are configuration errors.
pub fn as_config(e: SteerError) -> CliError {
    CliError::Config(e.to_string())
}
