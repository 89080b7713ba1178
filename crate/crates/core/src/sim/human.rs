use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Vec6, Wrench};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSwitch {
    /// [s]
    pub time: f64,
    pub goal: usize,
}

/// Saturated PD pull toward the active goal, on the linear axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticHuman {
    pub goals: Vec<[f64; 3]>,
    pub initial_goal: usize,
    /// [N/m]
    pub kp: f64,
    /// [Ns/m]
    pub kd: f64,
    /// Force norm limit [N].
    pub saturation: f64,
    pub switches: Vec<GoalSwitch>,
    /// Standard deviation of additive force noise [N].
    pub noise: f64,
}

impl Default for SyntheticHuman {
    fn default() -> Self {
        SyntheticHuman {
            goals: vec![[0.0; 3]],
            initial_goal: 0,
            kp: 600.0,
            kd: 0.0,
            saturation: 30.0,
            switches: vec![],
            noise: 0.0,
        }
    }
}

impl SyntheticHuman {
    pub fn validate(&self) -> Result<()> {
        if self.goals.is_empty() {
            return Err(Error::Config("human needs at least one goal".into()));
        }
        if self.initial_goal >= self.goals.len() || self.switches.iter().any(|s| s.goal >= self.goals.len()) {
            return Err(Error::Config("human goal index out of range".into()));
        }
        if !(self.kp >= 0.0 && self.kd >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("human gains and noise must be non-negative".into()));
        }
        if !(self.saturation > 0.0) {
            return Err(Error::Config("human force saturation must be positive".into()));
        }
        Ok(())
    }

    /// Index of the goal the human pursues at time `t`.
    pub fn active_goal(&self, t: f64) -> usize {
        self.switches
            .iter()
            .filter(|s| s.time <= t)
            .max_by(|a, b| a.time.total_cmp(&b.time))
            .map_or(self.initial_goal, |s| s.goal)
    }
}

/// Noise-free human force at time `t`.
pub fn human_force(h: &SyntheticHuman, x: &Vec6, xdot: &Vec6, t: f64) -> Wrench {
    let g = h.goals[h.active_goal(t)];
    let mut f = Vec6::zeros();
    for i in 0..3 {
        f[i] = h.kp * (g[i] - x[i]) - h.kd * xdot[i];
    }
    let norm = f.norm();
    if norm > h.saturation {
        f *= h.saturation / norm;
    }
    Wrench(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn human() -> SyntheticHuman {
        SyntheticHuman {
            goals: vec![[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]],
            kd: 10.0,
            switches: vec![GoalSwitch { time: 2.0, goal: 1 }],
            ..Default::default()
        }
    }

    #[test]
    fn at_goal_and_at_rest_is_zero() {
        let x = Vec6::from_row_slice(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(human_force(&human(), &x, &Vec6::zeros(), 0.0).0, Vec6::zeros());
    }

    #[test]
    fn far_away_saturates() {
        let x = Vec6::from_row_slice(&[-5.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let f = human_force(&human(), &x, &Vec6::zeros(), 0.0);
        assert!((f.0.norm() - 30.0).abs() < 1e-9);
        let dir = Vec6::from_row_slice(&[5.1, -3.0, 0.0, 0.0, 0.0, 0.0]).normalize();
        assert!((f.0.normalize() - dir).norm() < 1e-12);
    }

    #[test]
    fn switch_flips_direction() {
        let h = human();
        let x = Vec6::zeros();
        assert!(human_force(&h, &x, &x, 1.9)[0] > 0.0);
        assert!(human_force(&h, &x, &x, 2.0)[0] < 0.0);
        assert_eq!(h.active_goal(5.0), 1);
    }
}
