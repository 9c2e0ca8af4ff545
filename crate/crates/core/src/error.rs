use thiserror::Error;

use crate::equilibrium::EquilibriumError;
use crate::experiments::ExperimentError;
use crate::fairness_lp::LpError;
use crate::io::ConfigError;
use crate::model::ModelError;
use crate::simulate::SimulationError;

/// Process exit status used by the command-line driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Validation = 1,
    Numerical = 2,
    Io = 3,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Model(_) => ExitCode::Validation,
            Error::Equilibrium(e) => match e {
                EquilibriumError::ResidualTooLarge { .. } => ExitCode::Numerical,
                _ => ExitCode::Validation,
            },
            Error::Lp(e) => match e {
                LpError::NumericalFailure { .. } => ExitCode::Numerical,
                _ => ExitCode::Validation,
            },
            Error::Simulation(e) => match e {
                SimulationError::StepUnderflow { .. } | SimulationError::NonFiniteState { .. } => {
                    ExitCode::Numerical
                }
                _ => ExitCode::Validation,
            },
            Error::Experiment(e) => match e {
                ExperimentError::Model(_) => ExitCode::Validation,
                ExperimentError::Simulation(e) => Error::Simulation(e.clone()).exit_code(),
                ExperimentError::InvalidConfig(_) => ExitCode::Validation,
                _ => ExitCode::Numerical,
            },
            Error::Config(e) => match e {
                ConfigError::Io { .. } => ExitCode::Io,
                _ => ExitCode::Validation,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let e: Error = LpError::NumericalFailure { pivots: 10 }.into();
        assert_eq!(e.exit_code() as i32, 2);
        let e: Error = ModelError::NotSquare { rows: 1, cols: 2 }.into();
        assert_eq!(e.exit_code() as i32, 1);
        let e: Error = ConfigError::Io {
            path: "x".into(),
            message: "denied".into(),
        }
        .into();
        assert_eq!(e.exit_code() as i32, 3);
    }
}
