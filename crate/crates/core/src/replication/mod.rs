//! Simulation with known truth, cross-run comparison and run manifests.

pub mod compare;
pub mod manifest;
pub mod simulate;
pub mod smoothness;
