use serde::{Deserialize, Serialize};

use crate::admittance::Scheme;
use crate::error::{Error, Result};
use crate::human_arm::ArmGeometry;
use crate::mpc::costs::CostWeights;
use crate::mpc::ipm::IpmOptions;
use crate::types::DOF;

/// Floors, ceilings, and per-solve rate limits on the impedance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpedanceLimits {
    pub mass_min: [f64; DOF],
    pub mass_max: [f64; DOF],
    pub damping_min: [f64; DOF],
    pub damping_max: [f64; DOF],
    /// Largest mass change per solve.
    pub mass_rate: [f64; DOF],
    /// Largest damping change per solve.
    pub damping_rate: [f64; DOF],
    pub optimize_mass: bool,
    pub optimize_damping: bool,
}

impl Default for ImpedanceLimits {
    fn default() -> Self {
        ImpedanceLimits {
            mass_min: [5.0; DOF],
            mass_max: [40.0; DOF],
            damping_min: [500.0; DOF],
            damping_max: [5000.0; DOF],
            mass_rate: [5.0; DOF],
            damping_rate: [2000.0; DOF],
            optimize_mass: true,
            optimize_damping: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChanceConfig {
    pub enabled: bool,
    pub f_bar: f64,
    pub eps: f64,
    /// Per-axis sign `s` so the bounded quantity is `s * f`; zero disables the axis.
    pub sign: [f64; DOF],
    /// Use the Gaussian quantile `sqrt(2) erf^-1(1 - 2 eps)` instead of `erf^-1(1 - eps)`.
    pub strict_quantile: bool,
    /// Modes with less belief than this are not constrained.
    pub min_belief: f64,
}

impl Default for ChanceConfig {
    fn default() -> Self {
        ChanceConfig { enabled: false, f_bar: 12.0, eps: 0.5, sign: [0.0; DOF], strict_quantile: false, min_belief: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WellDampedConfig {
    pub enabled: bool,
    pub zeta: f64,
    pub axes: [bool; DOF],
    /// Smoothing of `|dF/dx|` in N/m; keeps the constraint differentiable at zero slope.
    pub slope_smoothing: f64,
}

impl Default for WellDampedConfig {
    fn default() -> Self {
        WellDampedConfig { enabled: false, zeta: 1.2, axes: [true, true, true, false, false, false], slope_smoothing: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceCostConfig {
    pub enabled: bool,
    pub weight: f64,
    /// Disturbance amplitude per axis; zero skips the axis.
    pub alpha: [f64; DOF],
    /// High-pass corner in rad/s.
    pub omega: f64,
    /// Environment stiffness seen by the disturbance model.
    pub stiffness: [f64; DOF],
}

impl Default for DisturbanceCostConfig {
    fn default() -> Self {
        DisturbanceCostConfig { enabled: false, weight: 1.0, alpha: [0.0; DOF], omega: 2.0 * std::f64::consts::PI * 15.0, stiffness: [0.0; DOF] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ErgonomicConfig {
    pub enabled: bool,
    pub arm: ArmGeometry,
}


/// Quadratic pull of the force reference toward a target, per axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceRefTarget {
    pub target: [f64; DOF],
    pub weight: [f64; DOF],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub ts: f64,
    pub scheme: Scheme,
    /// Pose axes planned by the controller; the rest are held at their current values.
    pub active_axes: Vec<usize>,
    pub weights: CostWeights,
    /// Penalty on the impedance change of one solve.
    pub q_delta_mass: [f64; DOF],
    pub q_delta_damping: [f64; DOF],
    /// Pull of the impedance toward its floors.
    pub q_mass_level: [f64; DOF],
    pub q_damping_level: [f64; DOF],
    pub limits: ImpedanceLimits,
    pub force_ref_min: [f64; DOF],
    pub force_ref_max: [f64; DOF],
    /// Continuity tolerance on the scaled shooting residuals.
    pub continuity_tol: f64,
    pub chance: ChanceConfig,
    pub well_damped: WellDampedConfig,
    pub disturbance: DisturbanceCostConfig,
    pub ergonomic: ErgonomicConfig,
    pub force_ref_target: Option<ForceRefTarget>,
    pub solver: IpmOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            ts: 0.02,
            scheme: Scheme::Implicit,
            active_axes: vec![0, 1, 2],
            weights: CostWeights::default(),
            q_delta_mass: [1e-4; DOF],
            q_delta_damping: [1e-7; DOF],
            q_mass_level: [0.0; DOF],
            q_damping_level: [0.0; DOF],
            limits: ImpedanceLimits::default(),
            force_ref_min: [-60.0; DOF],
            force_ref_max: [60.0; DOF],
            continuity_tol: 1e-6,
            chance: ChanceConfig::default(),
            well_damped: WellDampedConfig::default(),
            disturbance: DisturbanceCostConfig::default(),
            ergonomic: ErgonomicConfig::default(),
            force_ref_target: None,
            solver: IpmOptions::default(),
        }
    }
}

fn nonneg(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config(format!("{name} must be finite and non-negative")));
    }
    Ok(())
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("mpc.horizon must be at least 1".into()));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::Config("mpc.ts must be positive".into()));
        }
        if self.active_axes.is_empty() || self.active_axes.iter().any(|a| *a >= DOF) {
            return Err(Error::Config(format!("mpc.active_axes must list axes in 0..6, got {:?}", self.active_axes)));
        }
        let mut seen = [false; DOF];
        for a in &self.active_axes {
            if std::mem::replace(&mut seen[*a], true) {
                return Err(Error::Config(format!("mpc.active_axes repeats axis {a}")));
            }
        }
        self.weights.validate()?;
        nonneg("mpc.q_delta_mass", &self.q_delta_mass)?;
        nonneg("mpc.q_delta_damping", &self.q_delta_damping)?;
        nonneg("mpc.q_mass_level", &self.q_mass_level)?;
        nonneg("mpc.q_damping_level", &self.q_damping_level)?;
        let l = &self.limits;
        for i in 0..DOF {
            if !(l.mass_min[i] > 0.0 && l.mass_min[i] <= l.mass_max[i]) {
                return Err(Error::Config(format!("mass limits on axis {i} must satisfy 0 < min <= max")));
            }
            if !(l.damping_min[i] >= 0.0 && l.damping_min[i] <= l.damping_max[i]) {
                return Err(Error::Config(format!("damping limits on axis {i} must satisfy 0 <= min <= max")));
            }
            if self.force_ref_min[i] > self.force_ref_max[i] {
                return Err(Error::Config(format!("force reference bounds on axis {i} are empty")));
            }
        }
        nonneg("mpc.limits.mass_rate", &l.mass_rate)?;
        nonneg("mpc.limits.damping_rate", &l.damping_rate)?;
        if !(self.continuity_tol >= 0.0) {
            return Err(Error::Config("mpc.continuity_tol must be non-negative".into()));
        }
        let c = &self.chance;
        if c.enabled && !(c.eps > 0.0 && c.eps < 1.0) {
            return Err(Error::Config(format!("mpc.chance.eps must lie in (0, 1), got {}", c.eps)));
        }
        if self.well_damped.enabled && !(self.well_damped.zeta >= 1.0) {
            return Err(Error::Config("mpc.well_damped.zeta must be at least 1".into()));
        }
        if !(self.well_damped.slope_smoothing > 0.0) {
            return Err(Error::Config("mpc.well_damped.slope_smoothing must be positive".into()));
        }
        let d = &self.disturbance;
        if d.enabled && !(d.omega > 0.0 && d.weight >= 0.0) {
            return Err(Error::Config("mpc.disturbance needs omega > 0 and weight >= 0".into()));
        }
        nonneg("mpc.disturbance.alpha", &d.alpha)?;
        nonneg("mpc.disturbance.stiffness", &d.stiffness)?;
        if let Some(t) = &self.force_ref_target {
            nonneg("mpc.force_ref_target.weight", &t.weight)?;
        }
        self.ergonomic.arm.validate()?;
        Ok(())
    }
}
