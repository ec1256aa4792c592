//! Learning unknown components of semi-explicit index-1 DAE systems from
//! time-series data with an operator-splitting neural timestepper.
//!
//! One timestep updates the algebraic states through a trained surrogate
//! first, then advances the differential states with an explicit ODE step
//! using the fresh algebraic values. Rollouts stay on a reverse-mode autodiff
//! tape so a trajectory loss backpropagates through every step.
//!
//! The crate ships exact reference simulators for two flow-network case
//! studies (a tank–manifold inverse problem and a closed pump/tank network),
//! the training loop, and file I/O for datasets, checkpoints, and reports.

pub mod autodiff;
pub mod data;
pub mod integrators;
pub mod nn;
pub mod reference;
pub mod training;

pub use autodiff::{Tape, Value};
pub use data::Trajectory;
