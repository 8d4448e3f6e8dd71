//! Kinetic path energy diagnostics for flow-matching samplers.

pub mod error;
pub mod analysis;
pub mod cli;
pub mod fields;
pub mod mathcore;
pub mod mixture;
pub mod sampler;
pub mod semantics;
pub mod training;

pub use error::{KpeError, Result};
