//! Simulation and verification toolkit for boundary-case branching random
//! walks and the cascade measures they generate.

pub mod cascade;
pub mod envelope;
pub mod error;
pub mod experiment;
pub mod offspring;
#[cfg(test)]
mod properties;
pub mod quadrature;
pub mod rng;
pub mod spine;
pub mod stats;
pub mod tree;
pub mod verify;
pub mod walk;

pub use error::{Error, Result};
