//! Uncertainty-aware model predictive impedance control.
//!
//! Gaussian-process force models learned from a few demonstrations feed a
//! belief-weighted stochastic multiple-shooting MPC that plans a force
//! reference and impedance changes for an admittance-controlled robot.

pub mod admittance;
pub mod belief;
pub mod convexity;
pub mod error;
pub mod gp;
pub mod human_arm;
pub mod mpc;
pub mod optim;
pub mod sim;
pub mod types;

pub use admittance::{ImpedanceParams, Scheme, StateDist};
pub use belief::Belief;
pub use error::{Error, Result};
pub use gp::{GpForceModel, GpHyper, HingeMean, MeanFn};
pub use types::{Mat6, Pose, Vec6, Wrench, DOF};
