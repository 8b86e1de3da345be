//! Two-species Vlasov-Maxwell-Boltzmann solver in perturbative form, its
//! Vlasov-Poisson-Boltzmann limit, and diagnostics for the light-speed limit.

pub mod collision_kernel;
pub mod em_fields;
pub mod energy_diagnostics;
pub mod error;
pub mod kinetic_solver;
pub mod limit_harness;
pub mod macro_micro;
pub mod phase_grid;

pub use error::{Result, VmbError};
