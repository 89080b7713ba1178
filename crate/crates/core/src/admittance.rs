//! Discretized admittance dynamics and Gaussian state propagation.
//!
//! State is `[pose; velocity]` (12 entries). The rendered admittance
//! `f - f_ref = M xdd + D xd` is diagonal, so each axis evolves as an
//! independent position/velocity pair.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpForceModel;
use crate::types::{Pose, Vec6, Wrench, DOF};

pub const STATE_DIM: usize = 2 * DOF;
pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateMat = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMat = SMatrix<f64, STATE_DIM, DOF>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[default]
    Implicit,
    Exponential,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Implicit, Scheme::Exponential];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Implicit => "implicit",
            Scheme::Exponential => "exponential",
        }
    }
}

/// Diagonal virtual inertia, damping and optional stiffness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceParams {
    pub mass: Vec6,
    pub damping: Vec6,
    #[serde(default)]
    pub stiffness: Option<Vec6>,
}

impl ImpedanceParams {
    pub fn new(mass: Vec6, damping: Vec6) -> Result<Self> {
        let p = ImpedanceParams { mass, damping, stiffness: None };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(mass: f64, damping: f64) -> Self {
        ImpedanceParams { mass: Vec6::repeat(mass), damping: Vec6::repeat(damping), stiffness: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config(format!("mass must be positive: {:?}", self.mass.as_slice())));
        }
        if self.damping.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Config(format!("damping must be non-negative: {:?}", self.damping.as_slice())));
        }
        if let Some(k) = &self.stiffness {
            if k.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
                return Err(Error::Config("stiffness must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Per-axis velocity decay factor over one sample.
pub fn velocity_decay(mass: f64, damping: f64, ts: f64, scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Euler => 1.0 - ts * damping / mass,
        Scheme::Implicit => mass / (mass + ts * damping),
        Scheme::Exponential => (-ts * damping / mass).exp(),
    }
}

/// Derivatives of the decay factor with respect to mass and damping.
pub fn velocity_decay_grad(mass: f64, damping: f64, ts: f64, scheme: Scheme) -> (f64, f64) {
    match scheme {
        Scheme::Euler => (ts * damping / (mass * mass), -ts / mass),
        Scheme::Implicit => {
            let den = (mass + ts * damping).powi(2);
            (ts * damping / den, -ts * mass / den)
        }
        Scheme::Exponential => {
            let e = (-ts * damping / mass).exp();
            (e * ts * damping / (mass * mass), -e * ts / mass)
        }
    }
}

/// Second derivatives of the decay factor: (d2/dM2, d2/dMdD, d2/dD2).
pub fn velocity_decay_hess(mass: f64, damping: f64, ts: f64, scheme: Scheme) -> (f64, f64, f64) {
    match scheme {
        Scheme::Euler => (-2.0 * ts * damping / mass.powi(3), ts / (mass * mass), 0.0),
        Scheme::Implicit => {
            let s = mass + ts * damping;
            let mm = -2.0 * ts * damping / s.powi(3);
            let md = ts * (s - 2.0 * ts * damping) / s.powi(3);
            let dd = 2.0 * ts * ts * mass / s.powi(3);
            (mm, md, dd)
        }
        Scheme::Exponential => {
            let r = ts * damping / mass;
            let e = (-r).exp();
            let mm = e * (r * r / (mass * mass) - 2.0 * r / (mass * mass));
            let md = e * (ts / (mass * mass)) * (1.0 - r);
            let dd = e * ts * ts / (mass * mass);
            (mm, md, dd)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDynamics {
    pub a: StateMat,
    pub b: InputMat,
    pub ts: f64,
    pub scheme: Scheme,
}

/// Discretize the admittance; stiffness is not part of the discrete model.
pub fn discretize(phi: &ImpedanceParams, ts: f64, scheme: Scheme) -> Result<DiscreteDynamics> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Config(format!("sample time must be positive, got {ts}")));
    }
    phi.validate()?;
    let mut a = StateMat::identity();
    let mut b = InputMat::zeros();
    for i in 0..DOF {
        a[(i, DOF + i)] = ts;
        a[(DOF + i, DOF + i)] = velocity_decay(phi.mass[i], phi.damping[i], ts, scheme);
        b[(DOF + i, i)] = ts / phi.mass[i];
    }
    Ok(DiscreteDynamics { a, b, ts, scheme })
}

/// Axes whose explicit-Euler velocity update flips sign each step.
pub fn euler_oscillation_check(phi: &ImpedanceParams, ts: f64) -> [bool; DOF] {
    std::array::from_fn(|i| 1.0 - ts * phi.damping[i] / phi.mass[i] < 0.0)
}

/// Gaussian distribution over the 12-dimensional admittance state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDist {
    pub mean: StateVec,
    pub cov: StateMat,
}

impl StateDist {
    pub fn deterministic(pose: &Pose, vel: &Vec6) -> Self {
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<DOF>(0).copy_from(&pose.0);
        mean.fixed_rows_mut::<DOF>(DOF).copy_from(vel);
        StateDist { mean, cov: StateMat::zeros() }
    }

    pub fn pose(&self) -> Pose {
        Pose(self.mean.fixed_rows::<DOF>(0).into_owned())
    }

    pub fn velocity(&self) -> Vec6 {
        self.mean.fixed_rows::<DOF>(DOF).into_owned()
    }
}

pub fn propagate_mean(dynamics: &DiscreteDynamics, mean: &StateVec, f_mean: &Wrench, f_ref: &Wrench) -> StateVec {
    dynamics.a * mean + dynamics.b * (f_mean.0 - f_ref.0)
}

/// `A S A^T + B diag(f_var) B^T`, symmetrized.
pub fn propagate_cov(dynamics: &DiscreteDynamics, cov: &StateMat, f_var: &Vec6) -> StateMat {
    let raw = propagate_cov_raw(dynamics, cov, f_var);
    (raw + raw.transpose()) * 0.5
}

pub fn propagate_cov_raw(dynamics: &DiscreteDynamics, cov: &StateMat, f_var: &Vec6) -> StateMat {
    let sf = nalgebra::Matrix6::from_diagonal(f_var);
    dynamics.a * cov * dynamics.a.transpose() + dynamics.b * sf * dynamics.b.transpose()
}

/// Column-major `vec` of a dense matrix.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Vectorized covariance update: `vec(S+) = (A kron A) vec(S) + (B kron B) vec(Sf)`.
pub fn propagate_cov_vectorized(dynamics: &DiscreteDynamics, cov: &StateMat, f_var: &Vec6) -> StateMat {
    let a = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, dynamics.a.as_slice());
    let b = DMatrix::from_column_slice(STATE_DIM, DOF, dynamics.b.as_slice());
    let sigma = DVector::from_column_slice(cov.as_slice());
    let sf = DMatrix::from_diagonal(&DVector::from_column_slice(f_var.as_slice()));
    let out = a.kronecker(&a) * sigma + b.kronecker(&b) * vec_of(&sf);
    StateMat::from_column_slice(out.as_slice())
}

/// Roll the Gaussian state forward `horizon` steps, evaluating the force model at each mean.
///
/// `dynamics` holds one entry per step, or a single entry reused for all steps.
pub fn rollout(
    dynamics: &[DiscreteDynamics],
    init: &StateDist,
    model: &GpForceModel,
    f_ref: &[Wrench],
    horizon: usize,
) -> Result<Vec<StateDist>> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if dynamics.is_empty() || (dynamics.len() != 1 && dynamics.len() < horizon) {
        return Err(Error::Dimension(format!("{} dynamics for horizon {horizon}", dynamics.len())));
    }
    if f_ref.len() < horizon {
        return Err(Error::Dimension(format!("{} force references for horizon {horizon}", f_ref.len())));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut cur = init.clone();
    for (k, fr) in f_ref.iter().enumerate().take(horizon) {
        let dynk = if dynamics.len() == 1 { &dynamics[0] } else { &dynamics[k] };
        let (fm, fv) = model.posterior(&cur.pose());
        let mean = propagate_mean(dynk, &cur.mean, &fm, fr);
        let cov = propagate_cov(dynk, &cur.cov, &fv);
        cur = StateDist { mean, cov };
        out.push(cur.clone());
    }
    Ok(out)
}
