//! Density and statistics pipelines relating path energy to the data.

pub mod density;
pub mod features;
pub mod stats;
