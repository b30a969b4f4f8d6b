pub mod basins;
pub mod error;
pub mod features;
pub mod harness;
pub mod integrator;
pub mod ngrc;
pub mod systems;

pub use error::{Error, Result};

/// A point in the phase space of a dynamical system.
pub type StateVector = Vec<f64>;
