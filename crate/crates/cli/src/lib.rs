//! Scenario-driven front end for the `gmmsteer` library: JSON scenarios in, policies, predicted
//! terminal mixtures, trajectories, density grids and metrics out.

pub mod commands;
pub mod error;
pub mod io;
pub mod scenario;

pub use error::{CliError, CliResult};
