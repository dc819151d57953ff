use thiserror::Error;

use crate::model::ValidationReport;

/// Errors produced by the solvers.
///
/// Variants split into two families: input problems (bad dimensions, invalid
/// parameters, malformed configuration) and numerical failures (blow-up, mass
/// drift, non-finite states). [`Error::is_numerical`] tells them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters:\n{0}")]
    Validation(ValidationReport),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scenario shape mismatch: {0}")]
    Scenario(String),

    #[error("class {0} has no agents")]
    EmptyClass(usize),

    #[error("{what} blew up at t = {t:.6} (norm {norm:.3e})")]
    BlowUp {
        what: &'static str,
        t: f64,
        norm: f64,
    },

    #[error(
        "aggregate Riccati equation has no solution on this horizon: blow-up at t = {t:.6} (norm {norm:.3e})"
    )]
    AggregateRiccati { t: f64, norm: f64 },

    #[error("ill-conditioned fundamental matrix at t = {t:.6} (condition number {cond:.3e})")]
    IllConditioned { t: f64, cond: f64 },

    #[error(
        "probability mass drifted to {mass:.6} at t = {t:.6}; refine the spatial grid or widen the domain"
    )]
    MassDrift { t: f64, mass: f64 },

    #[error("non-finite state for agent {agent} at step {step}")]
    NonFinite { agent: usize, step: usize },

    #[error("every cell probability vanished at t = {t:.6}, x = {x:?}")]
    NoSupportedCell { t: f64, x: Vec<f64> },
}

impl Error {
    /// True for failures of the numerical method rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::AggregateRiccati { .. }
                | Error::IllConditioned { .. }
                | Error::MassDrift { .. }
                | Error::NonFinite { .. }
                | Error::NoSupportedCell { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
