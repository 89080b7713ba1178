//! Shared value types: poses, wrenches, and small fixed-size aliases.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Number of pose / wrench coordinates (three linear, three angular).
pub const DOF: usize = 6;

/// TCP pose: x, y, z in metres followed by three TCP-frame angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub Vec6);

/// Forces in newtons followed by torques in newton-metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wrench(pub Vec6);

impl Pose {
    pub fn zeros() -> Self {
        Pose(Vec6::zeros())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Pose(Vec6::from_column_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Wrench {
    pub fn zeros() -> Self {
        Wrench(Vec6::zeros())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Wrench(Vec6::from_column_slice(v))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Pose {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::Index<usize> for Wrench {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}
