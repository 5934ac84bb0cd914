//! Numerical laboratory for temperature-accelerated sampling dynamics on
//! periodic model systems: exact free-energy quadrature, stochastic
//! integrators, dense grid solvers for the forward operators, and
//! trajectory-based estimators, all driven by a small config-file CLI.

pub mod error;
pub mod model;
pub mod spectral;
pub mod freenergy;
pub mod sde;
pub mod fpgrid;
pub mod estimators;
pub mod cli;

pub use error::{Result, TamdError};
