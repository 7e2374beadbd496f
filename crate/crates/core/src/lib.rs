//! Simulation and processing of HMQC and perfect-echo HMQC experiments on
//! small spin-½ systems.

pub mod acquisition;
pub mod checks;
pub mod hilbert;
pub mod po;
pub mod processing;
pub mod sequence;
pub mod spin_system;
