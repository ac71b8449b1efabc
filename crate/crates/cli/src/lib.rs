//! Command-line front end for `nuisance-eig`: configuration, pilots,
//! allocation, estimation, design sweeps and search, and the tolerance
//! consistency experiment. Every command returns data plus a CSV or JSON
//! rendering; `main` only handles arguments, files and exit codes.

pub mod commands;
pub mod config;

use nuisance_eig::EigError;

pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("allocation infeasible: {0}")]
    Infeasible(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("no analytic reference: {0}")]
    NoOracle(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Estimation(_) => 4,
            Self::NoOracle(_) => 5,
        }
    }
}

impl From<EigError> for CliError {
    fn from(e: EigError) -> Self {
        match e {
            EigError::InvalidConfig(_) | EigError::Dimension { .. } => Self::Config(e.to_string()),
            EigError::Infeasible(_) => Self::Infeasible(e.to_string()),
            _ => Self::Estimation(e.to_string()),
        }
    }
}
