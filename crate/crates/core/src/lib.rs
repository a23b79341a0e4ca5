//! Risk-averse hydro storage dispatch on recombining price lattices.
//!
//! A log-barrier interior-point method with a backward Riccati recursion
//! solves the multistage stochastic dispatch problem; water values follow
//! from the optimal plan as shadow prices of the basin level.

pub mod backtest;
pub mod hydro;
pub mod lattice;
pub mod pipeline;
pub mod processes;
pub mod solver;
pub mod utility;

pub use lattice::{Lattice, LatticeError, NodeField};
pub use utility::{Utility, UtilityError, UtilityKind};
