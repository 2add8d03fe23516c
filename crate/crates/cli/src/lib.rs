//! Command-line driver: configuration, commands and writers.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;

use crossdiff::experiments::ExperimentError;
use crossdiff::solver::SolverError;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; nothing was computed or written.
    Config(String),
    /// Newton continuation gave up.
    Stall(String),
    Io(String),
    /// The run finished but a check failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Stall(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Stall(m) => write!(f, "solver stalled: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Solver(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Stall { .. } => CliError::Stall(e.to_string()),
            SolverError::Config(m) => CliError::Config(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let stall = SolverError::Stall {
            step: 3,
            time: 0.1,
            path: vec![],
            completed: vec![],
        };
        assert_eq!(CliError::from(stall).exit_code(), 3);
        assert_eq!(CliError::from(ExperimentError::ZeroMatrix).exit_code(), 2);
        assert_eq!(CliError::from(std::io::Error::other("disk")).exit_code(), 4);
        assert_eq!(CliError::Failed(String::new()).exit_code(), 1);
    }
}
