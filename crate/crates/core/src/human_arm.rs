//! Four-joint human arm: three shoulder rotations and elbow flexion.
//!
//! Convention: with `q = 0` the extended arm hangs along world `-z`. The
//! shoulder rotation is `Ry(-q1) * Rx(q2) * Rz(q3)`: flexion `q1` swings the
//! arm forward toward `+x`, abduction `q2` rotates about world `x`, and `q3`
//! rotates about the upper-arm axis. Elbow flexion `q4` bends the forearm
//! toward the upper-arm frame's `+x`.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmGeometry {
    pub upper_arm: f64,
    pub forearm: f64,
    pub shoulder: [f64; 3],
}

impl Default for ArmGeometry {
    fn default() -> Self {
        ArmGeometry { upper_arm: 0.30, forearm: 0.28, shoulder: [0.0, -0.2, 0.45] }
    }
}

impl ArmGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.upper_arm > 0.0 && self.forearm > 0.0) {
            return Err(Error::Config("arm segment lengths must be positive".into()));
        }
        Ok(())
    }

    fn shoulder(&self) -> Vector3<f64> {
        Vector3::from(self.shoulder)
    }
}

/// Joint angles `[flexion, abduction, internal rotation, elbow]` in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig(pub Vector4<f64>);

impl ArmConfig {
    pub fn zeros() -> Self {
        ArmConfig(Vector4::zeros())
    }
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn dry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Hand position relative to the shoulder, in the upper-arm frame.
fn local_hand(q4: f64, g: &ArmGeometry) -> Vector3<f64> {
    Vector3::new(g.forearm * q4.sin(), 0.0, -g.upper_arm - g.forearm * q4.cos())
}

/// Forward kinematics: hand position in world coordinates.
pub fn fk(q: &ArmConfig, geom: &ArmGeometry) -> Vector3<f64> {
    let q = &q.0;
    geom.shoulder() + ry(-q[0]) * rx(q[1]) * rz(q[2]) * local_hand(q[3], geom)
}

/// Position Jacobian `d hand / d q` (3x4).
pub fn jacobian(q: &ArmConfig, geom: &ArmGeometry) -> Matrix3x4<f64> {
    let q = &q.0;
    let p = local_hand(q[3], geom);
    let dp = Vector3::new(geom.forearm * q[3].cos(), 0.0, geom.forearm * q[3].sin());
    let (r1, r2, r3) = (ry(-q[0]), rx(q[1]), rz(q[2]));
    let mut j = Matrix3x4::zeros();
    j.set_column(0, &(-dry(-q[0]) * r2 * r3 * p));
    j.set_column(1, &(r1 * drx(q[1]) * r3 * p));
    j.set_column(2, &(r1 * r2 * drz(q[2]) * p));
    j.set_column(3, &(r1 * r2 * r3 * dp));
    j
}

/// Inverse kinematics with zero upper-arm rotation (`q3 = 0`).
///
/// Uses the elbow angle in `[0, pi]` from the law of cosines and the principal
/// abduction branch. Fails when the target is outside the reachable shell or
/// outside the `q3 = 0` slice of the workspace.
pub fn ik_simplified(hand: &Vector3<f64>, geom: &ArmGeometry) -> Result<ArmConfig> {
    ik_impl(hand, geom, false)
}

/// Like [`ik_simplified`] but clamps unreachable targets to the nearest
/// solvable configuration and logs a warning.
pub fn ik_simplified_clamped(hand: &Vector3<f64>, geom: &ArmGeometry) -> ArmConfig {
    ik_impl(hand, geom, true).expect("clamped inverse kinematics is total")
}

fn ik_impl(hand: &Vector3<f64>, geom: &ArmGeometry, clamp: bool) -> Result<ArmConfig> {
    let (l1, l2) = (geom.upper_arm, geom.forearm);
    let h = hand - geom.shoulder();
    let d = h.norm();
    let (dmin, dmax) = ((l1 - l2).abs(), l1 + l2);
    let tol = 1e-12 * dmax;
    if !clamp && (d > dmax + tol || d < dmin - tol) {
        return Err(Error::Unreachable { distance: d, min: dmin, max: dmax });
    }
    let cos4 = ((d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q4 = cos4.acos();
    let a = l2 * q4.sin();
    let c = -l1 - l2 * q4.cos();
    let s2 = if c.abs() < 1e-15 { 0.0 } else { -h.y / c };
    if !clamp && s2.abs() > 1.0 + 1e-9 {
        return Err(Error::Unreachable { distance: d, min: dmin, max: dmax });
    }
    if clamp && (d > dmax || d < dmin || s2.abs() > 1.0) {
        log::warn!("arm target {:?} outside workspace; clamping", hand.as_slice());
    }
    let q2 = s2.clamp(-1.0, 1.0).asin();
    // after abduction the hand lies at (a, ., c cos q2); flexion rotates it in the x-z plane
    let wx = a;
    let wz = c * q2.cos();
    let theta = wz.atan2(wx) - h.z.atan2(h.x);
    let q1 = -theta;
    let q1 = (q1 + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    Ok(ArmConfig(Vector4::new(q1, q2, 0.0, q4)))
}

/// Joint torques from a hand force: `J^T f`.
pub fn joint_torque(q: &ArmConfig, geom: &ArmGeometry, f_hand: &Vector3<f64>) -> Vector4<f64> {
    jacobian(q, geom).transpose() * f_hand
}
