use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Vec6, Wrench, DOF};

/// Axis-aligned unilateral wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactEnv {
    pub axis: usize,
    /// Plane location along `axis` [m].
    pub location: f64,
    /// +1: the wall fills `x > location`; -1: it fills `x < location`.
    pub normal: f64,
    /// [N/m]
    pub stiffness: f64,
    /// Half-range of the per-episode location jitter [m].
    pub jitter: f64,
    /// Contact damping as a fraction of critical damping for `reference_mass`.
    pub damping_ratio: f64,
    pub reference_mass: f64,
    pub unilateral: bool,
}

impl Default for ContactEnv {
    fn default() -> Self {
        ContactEnv {
            axis: 0,
            location: 0.0,
            normal: 1.0,
            stiffness: 45_000.0,
            jitter: 0.0,
            damping_ratio: 0.02,
            reference_mass: 5.0,
            unilateral: true,
        }
    }
}

impl ContactEnv {
    pub fn validate(&self) -> Result<()> {
        if self.axis >= DOF {
            return Err(Error::Config(format!("contact axis {} out of range", self.axis)));
        }
        if self.normal.abs() != 1.0 {
            return Err(Error::Config("contact normal must be +1 or -1".into()));
        }
        if !(self.stiffness >= 0.0 && self.stiffness.is_finite()) {
            return Err(Error::Config("contact stiffness must be non-negative".into()));
        }
        if !(self.jitter >= 0.0 && self.damping_ratio >= 0.0 && self.reference_mass > 0.0) {
            return Err(Error::Config("contact jitter, damping ratio and reference mass must be non-negative".into()));
        }
        Ok(())
    }

    /// Copy with the location drawn from the jitter range.
    pub fn sample_episode<R: Rng>(&self, rng: &mut R) -> ContactEnv {
        let mut e = self.clone();
        if self.jitter > 0.0 {
            e.location += rng.random_range(-self.jitter..=self.jitter);
        }
        e.jitter = 0.0;
        e
    }

    pub fn contact_damping(&self) -> f64 {
        self.damping_ratio * 2.0 * (self.stiffness * self.reference_mass).sqrt()
    }

    pub fn penetration(&self, x: &Vec6) -> f64 {
        self.normal * (x[self.axis] - self.location)
    }
}

/// Spring-damper wall force on the robot; zero on the free side and never
/// pulling when unilateral.
pub fn contact_force(env: &ContactEnv, x: &Vec6, xdot: &Vec6) -> Wrench {
    let mut f = Vec6::zeros();
    let pen = env.penetration(x);
    if pen > 0.0 {
        let rate = env.normal * xdot[env.axis];
        let mut push = env.stiffness * pen + env.contact_damping() * rate;
        if env.unilateral {
            push = push.max(0.0);
        }
        f[env.axis] = -env.normal * push;
    }
    Wrench(f)
}

/// Sum over several walls.
pub fn total_contact_force(envs: &[ContactEnv], x: &Vec6, xdot: &Vec6) -> Wrench {
    Wrench(envs.iter().map(|e| contact_force(e, x, xdot).0).sum())
}
