use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::log::{PlanStatus, RunLog};
use crate::types::DOF;

/// RMS of the parts of `x` below and above `split_hz`, using an ideal
/// zero-phase band split in the frequency domain. The mean goes to the low band.
pub fn band_rms(x: &[f64], ts: f64, split_hz: f64) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (mut lo, mut hi) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate() {
        let freq = k.min(n - k) as f64 / (n as f64 * ts);
        if freq <= split_hz {
            lo += c.norm_sqr();
        } else {
            hi += c.norm_sqr();
        }
    }
    let nn = (n * n) as f64;
    ((lo / nn).sqrt(), (hi / nn).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisImpedance {
    pub axis: usize,
    pub mass_mean: f64,
    pub mass_min: f64,
    pub mass_max: f64,
    pub damping_mean: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    pub damping_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub duration: f64,
    pub peak_contact_force: f64,
    pub contact_loss_events: usize,
    pub split_hz: f64,
    /// Linear-axis velocity RMS below the split [m/s].
    pub rms_velocity_low: f64,
    pub rms_velocity_high: f64,
    pub mpc_steps: usize,
    pub infeasible_steps: usize,
    pub final_belief: Vec<f64>,
    pub impedance: Vec<AxisImpedance>,
}

impl Summary {
    pub fn infeasible_fraction(&self) -> f64 {
        if self.mpc_steps == 0 {
            0.0
        } else {
            self.infeasible_steps as f64 / self.mpc_steps as f64
        }
    }

    pub fn to_report(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

/// Times contact is lost after the first touch.
pub fn contact_loss_events(log: &RunLog) -> usize {
    let mut touched = false;
    let mut in_contact = false;
    let mut events = 0;
    for r in &log.rows {
        let now = r.f_contact.iter().any(|f| *f != 0.0);
        if touched && in_contact && !now {
            events += 1;
        }
        touched |= now;
        in_contact = now;
    }
    events
}

pub fn metrics(log: &RunLog, split_hz: f64) -> Result<Summary> {
    if log.rows.is_empty() {
        return Err(Error::EmptyData("run log has no rows".into()));
    }
    if !(split_hz > 0.0) {
        return Err(Error::Config("split frequency must be positive".into()));
    }
    let n = log.rows.len();
    let ts = if n > 1 { (log.rows[n - 1].t - log.rows[0].t) / (n - 1) as f64 } else { 1.0 };
    let (mut lo2, mut hi2) = (0.0, 0.0);
    for a in 0..3 {
        let v: Vec<f64> = log.rows.iter().map(|r| r.v[a]).collect();
        let (lo, hi) = band_rms(&v, ts, split_hz);
        lo2 += lo * lo;
        hi2 += hi * hi;
    }
    let impedance = (0..DOF)
        .map(|axis| {
            let m: Vec<f64> = log.rows.iter().map(|r| r.mass[axis]).collect();
            let d: Vec<f64> = log.rows.iter().map(|r| r.damping[axis]).collect();
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            AxisImpedance {
                axis,
                mass_mean: mean(&m),
                mass_min: m.iter().copied().fold(f64::INFINITY, f64::min),
                mass_max: m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                damping_mean: mean(&d),
                damping_min: d.iter().copied().fold(f64::INFINITY, f64::min),
                damping_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                damping_final: d[n - 1],
            }
        })
        .collect();
    let mpc_rows = log.rows.iter().filter(|r| r.mpc_step);
    Ok(Summary {
        steps: n,
        duration: log.rows[n - 1].t - log.rows[0].t + ts,
        peak_contact_force: log.rows.iter().map(|r| r.f_contact.norm()).fold(0.0, f64::max),
        contact_loss_events: contact_loss_events(log),
        split_hz,
        rms_velocity_low: lo2.sqrt(),
        rms_velocity_high: hi2.sqrt(),
        mpc_steps: mpc_rows.clone().count(),
        infeasible_steps: mpc_rows.filter(|r| r.status == PlanStatus::Infeasible).count(),
        final_belief: log.rows[n - 1].belief.clone(),
        impedance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::log::LogRow;
    use crate::types::Vec6;
    use std::f64::consts::PI;

    fn velocity_log(f: impl Fn(f64) -> f64, n: usize, ts: f64) -> RunLog {
        let rows = (0..n)
            .map(|i| {
                let t = i as f64 * ts;
                let mut v = Vec6::zeros();
                v[0] = f(t);
                LogRow {
                    t,
                    x: Vec6::zeros(),
                    v,
                    f_human: Vec6::zeros(),
                    f_contact: Vec6::zeros(),
                    f_disturbance: Vec6::zeros(),
                    f_total: Vec6::zeros(),
                    f_ref: Vec6::zeros(),
                    mass: Vec6::repeat(5.0),
                    damping: Vec6::repeat(500.0),
                    belief: vec![1.0],
                    status: PlanStatus::None,
                    mpc_step: false,
                }
            })
            .collect();
        RunLog { modes: 1, rows }
    }

    #[test]
    fn constant_velocity_has_no_high_band() {
        let s = metrics(&velocity_log(|_| 0.3, 2000, 0.002), 15.0).unwrap();
        assert!(s.rms_velocity_high < 1e-12);
        assert!((s.rms_velocity_low - 0.3).abs() < 1e-12);
    }

    #[test]
    fn twenty_hertz_sinusoid_split() {
        let a = 0.02;
        let s = metrics(&velocity_log(|t| a * (2.0 * PI * 20.0 * t).sin(), 2500, 0.002), 15.0).unwrap();
        let expected = a / 2f64.sqrt();
        assert!((s.rms_velocity_high - expected).abs() < 0.05 * expected, "{}", s.rms_velocity_high);
        assert!(s.rms_velocity_low < 0.05 * expected);
    }

    #[test]
    fn band_split_is_energy_preserving() {
        let x: Vec<f64> = (0..777).map(|i| ((i * 37 % 101) as f64).sin() + 0.2).collect();
        let (lo, hi) = band_rms(&x, 0.002, 15.0);
        let total = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!((lo * lo + hi * hi - total * total).abs() < 1e-10);
    }

    #[test]
    fn counts_contact_losses_after_first_touch() {
        let mut log = velocity_log(|_| 0.0, 10, 0.002);
        for (i, on) in [0, 0, 1, 1, 0, 1, 0, 0, 1, 1].iter().enumerate() {
            log.rows[i].f_contact[0] = -(*on as f64);
        }
        assert_eq!(contact_loss_events(&log), 2);
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(metrics(&RunLog::default(), 15.0).is_err());
    }
}
