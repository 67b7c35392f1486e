use thiserror::Error;

use crate::balance::BalanceError;
use crate::config::ConfigError;
use crate::graph::GraphError;
use crate::models::{ModelViolation, ScenarioError, ValidationErrors};
use crate::optimize::OptimizeError;
use crate::riccati::RiccatiError;
use crate::schedule::ScheduleError;
use crate::simkf::SimError;

/// Crate-level error, split into input problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid scenario: {0}")]
    Scenario(#[from] ValidationErrors<ScenarioError>),
    #[error("invalid target: {0}")]
    Target(#[from] ValidationErrors<ModelViolation>),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for bad input (exit code 1); false for numerical failure (2).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Scenario(_) | Error::Target(_) | Error::Schedule(_) => true,
            Error::Graph(e) => !matches!(e, GraphError::TooLarge(_)),
            Error::Balance(e) => e.is_validation(),
            Error::Optimize(e) => e.is_validation(),
            Error::Sim(e) => e.is_validation(),
            Error::Riccati(_) | Error::Io(_) => false,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Scenario(_) | Error::Target(_) => "validation",
            Error::Graph(_) => "graph",
            Error::Schedule(_) => "schedule",
            Error::Riccati(_) => "riccati",
            Error::Balance(_) => "balance",
            Error::Optimize(_) => "optimize",
            Error::Sim(_) => "simulate",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
