//! Solvers for Min-LQG mean-field games: agents with linear dynamics and
//! quadratic costs that must end near one of several destinations.
//!
//! * [`lqg`]: Riccati equations and single-destination tracking problems.
//! * [`minlqg`]: the explicit Min-LQG value, control and choice probabilities.
//! * [`meanfield`]: mean paths, Fokker-Planck propagation and the fixed-point
//!   map over choice distribution matrices.
//! * [`mc`]: Monte Carlo population simulation and equilibrium checks.

pub mod config;
pub mod error;
pub mod lqg;
pub mod mc;
pub mod meanfield;
pub mod minlqg;
pub mod model;
pub mod numeric;

pub use config::{reference_binary, ScenarioConfig};
pub use error::{Error, Result};
pub use model::{
    validate_params, weighted_norm_sq, AgentClassParams, ClassModel, DestinationSet,
    InitialDistribution, Population, Scenario, TimeGrid, ValidationReport,
};
