//! Discrete belief over human modes, updated from force observations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpForceModel;
use crate::types::{Pose, Vec6, Wrench, DOF};

pub const DEFAULT_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dimension("belief needs at least one mode".into()));
        }
        Ok(Belief { probs: vec![1.0 / n as f64; n] })
    }

    /// Normalizes `weights`; they must be non-negative with positive sum.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Dimension("belief needs at least one mode".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("belief weights must be finite and non-negative: {weights:?}")));
        }
        let s: f64 = weights.iter().sum();
        if s <= 0.0 {
            return Err(Error::Config("belief weights sum to zero".into()));
        }
        Ok(Belief { probs: weights.iter().map(|w| w / s).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Log density of `f` under independent Gaussians with the given means and variances.
pub fn log_likelihood(f: &Wrench, mean: &Wrench, var: &Vec6) -> f64 {
    let mut ll = 0.0;
    for i in 0..DOF {
        let v = var[i].max(1e-300);
        let r = f[i] - mean[i];
        ll -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
    }
    ll
}

/// Bayes update from per-mode log-likelihoods, computed in log space.
pub fn update_from_log_likelihoods(b: &Belief, log_lik: &[f64]) -> Result<Belief> {
    if log_lik.len() != b.len() {
        return Err(Error::Dimension(format!("{} likelihoods for {} modes", log_lik.len(), b.len())));
    }
    let logs: Vec<f64> = b.probs.iter().zip(log_lik).map(|(p, l)| if *p > 0.0 { p.ln() + l } else { f64::NEG_INFINITY }).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Degenerate("all mode likelihoods vanished".into()));
    }
    Belief::new(logs.iter().map(|l| (l - m).exp()).collect())
}

/// Bayes update with each mode's observation density at `x`: GP posterior
/// mean, and posterior variance plus observation noise.
pub fn update(b: &Belief, f: &Wrench, x: &Pose, models: &[GpForceModel]) -> Result<Belief> {
    if models.len() != b.len() {
        return Err(Error::Dimension(format!("{} models for {} modes", models.len(), b.len())));
    }
    let ll: Vec<f64> = models
        .iter()
        .map(|m| {
            let (mean, mut var) = m.posterior(x);
            for (i, ax) in m.axes().iter().enumerate() {
                var[i] += ax.hyper().noise_var;
            }
            log_likelihood(f, &mean, &var)
        })
        .collect();
    update_from_log_likelihoods(b, &ll)
}

/// Raises every probability to at least `floor`, taking the added mass
/// proportionally from the modes above the floor.
pub fn decay_floor(b: &Belief, floor: f64) -> Result<Belief> {
    let n = b.len();
    if !(floor >= 0.0 && floor * (n as f64) < 1.0) {
        return Err(Error::Config(format!("belief floor {floor} must lie in [0, 1/{n})")));
    }
    if floor == 0.0 {
        return Ok(b.clone());
    }
    let mut clamped = vec![false; n];
    loop {
        let k = clamped.iter().filter(|c| **c).count();
        let free_mass: f64 = (0..n).filter(|&i| !clamped[i]).map(|i| b.probs[i]).sum();
        let budget = 1.0 - k as f64 * floor;
        let scale = if free_mass > 0.0 { budget / free_mass } else { 0.0 };
        let mut changed = false;
        for i in 0..n {
            if !clamped[i] && b.probs[i] * scale < floor {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            let probs = (0..n).map(|i| if clamped[i] { floor } else { b.probs[i] * scale }).collect();
            return Ok(Belief { probs });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{AxisGp, AxisGpData, GpHyper, MeanFn};
    use proptest::prelude::*;

    fn sum(b: &Belief) -> f64 {
        b.probs().iter().sum()
    }

    fn constant_model(level: f64) -> GpForceModel {
        let axes = (0..DOF)
            .map(|_| {
                AxisGp::new(AxisGpData {
                    inputs: vec![[0.0; DOF]],
                    targets: vec![level],
                    hyper: GpHyper { signal_var: 1.0, noise_var: 0.01, length_scales: [0.1; DOF] },
                    mean: MeanFn::Zero,
                })
                .unwrap()
            })
            .collect();
        GpForceModel::new(axes).unwrap()
    }

    #[test]
    fn single_mode_stays_certain() {
        let b = Belief::uniform(1).unwrap();
        let m = constant_model(3.0);
        let b2 = update(&b, &Wrench::zeros(), &Pose::zeros(), &[m]).unwrap();
        assert_eq!(b2.probs(), &[1.0]);
    }

    #[test]
    fn identical_models_leave_belief() {
        let b = Belief::new(vec![0.3, 0.7]).unwrap();
        let m = constant_model(2.0);
        let b2 = update(&b, &Wrench::zeros(), &Pose::zeros(), &[m.clone(), m]).unwrap();
        assert!((b2.probs()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn likelihood_ratio() {
        let var = Vec6::from_element(1.0);
        let mut m2 = Wrench::zeros();
        m2.0[0] = 10.0;
        let ll = [log_likelihood(&Wrench::zeros(), &Wrench::zeros(), &var), log_likelihood(&Wrench::zeros(), &m2, &var)];
        let b = update_from_log_likelihoods(&Belief::uniform(2).unwrap(), &ll).unwrap();
        let expected = 1.0 / (1.0 + (-50.0f64).exp());
        assert!((b.probs()[0] - expected).abs() < 1e-15);
        assert!(b.probs()[1] > 0.0 && (b.probs()[1] - (-50.0f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn underflow_is_handled() {
        let b = update_from_log_likelihoods(&Belief::uniform(2).unwrap(), &[-1e6, -1e6 - 3.0]).unwrap();
        assert!((b.probs()[0] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
        assert!(update_from_log_likelihoods(&Belief::uniform(2).unwrap(), &[f64::NEG_INFINITY; 2]).is_err());
    }

    #[test]
    fn floor_cases() {
        let b = Belief::new(vec![1.0, 0.0]).unwrap();
        let f = decay_floor(&b, 0.01).unwrap();
        assert!((f.probs()[0] - 0.99).abs() < 1e-15 && (f.probs()[1] - 0.01).abs() < 1e-15);
        assert_eq!(decay_floor(&b, 0.0).unwrap(), b);
        let u = Belief::uniform(4).unwrap();
        assert_eq!(decay_floor(&u, 0.1).unwrap(), u);
        assert!(decay_floor(&u, 0.25).is_err());
    }

    proptest! {
        #[test]
        fn update_normalized_and_scale_invariant(
            w in proptest::collection::vec(0.01f64..1.0, 1..6),
            ll in proptest::collection::vec(-50.0f64..5.0, 6),
            shift in -100.0f64..100.0,
            scale in 0.1f64..10.0,
        ) {
            let n = w.len();
            let b = Belief::new(w.clone()).unwrap();
            let b2 = update_from_log_likelihoods(&b, &ll[..n]).unwrap();
            prop_assert!((sum(&b2) - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = ll[..n].iter().map(|l| l + shift).collect();
            let b3 = update_from_log_likelihoods(&Belief::new(w.iter().map(|x| x * scale).collect()).unwrap(), &shifted).unwrap();
            for i in 0..n {
                prop_assert!((b2.probs()[i] - b3.probs()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn floor_respected(w in proptest::collection::vec(0.0f64..1.0, 2..6), frac in 0.0f64..0.99) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let b = Belief::new(w.clone()).unwrap();
            let floor = frac / w.len() as f64;
            let f = decay_floor(&b, floor).unwrap();
            prop_assert!((sum(&f) - 1.0).abs() < 1e-12);
            prop_assert!(f.probs().iter().all(|p| *p >= floor - 1e-15));
        }
    }
}
