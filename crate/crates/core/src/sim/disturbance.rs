use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Vec6, Wrench, DOF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Carrier {
    /// Sinusoid at the given frequency [Hz].
    Sinusoid { hz: f64 },
    /// White noise through a second-order high-pass at the cutoff.
    Noise { seed: u64 },
}

/// High-frequency task disturbance, e.g. tool chatter while polishing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceGen {
    pub enabled: bool,
    /// [N]
    pub amplitude: f64,
    /// [rad/s]
    pub cutoff: f64,
    pub carrier: Carrier,
    pub axes: [bool; DOF],
}

impl Default for DisturbanceGen {
    fn default() -> Self {
        DisturbanceGen {
            enabled: false,
            amplitude: 5.0,
            cutoff: 2.0 * PI * 15.0,
            carrier: Carrier::Sinusoid { hz: 25.0 },
            axes: [true, true, true, false, false, false],
        }
    }
}

impl DisturbanceGen {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.cutoff > 0.0) {
            return Err(Error::Config("disturbance amplitude must be non-negative and cutoff positive".into()));
        }
        if let Carrier::Sinusoid { hz } = self.carrier {
            if !(hz > 0.0) {
                return Err(Error::Config("disturbance frequency must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Stateful sampler of the disturbance force at a fixed sample time.
#[derive(Clone, Debug)]
pub struct DisturbanceSource {
    gen: DisturbanceGen,
    ts: f64,
    rng: ChaCha8Rng,
    // Tustin biquad state per axis: (x1, x2, y1, y2)
    state: [[f64; 4]; DOF],
    coef: [f64; 5],
    step: u64,
}

impl DisturbanceSource {
    pub fn new(gen: &DisturbanceGen, ts: f64) -> Self {
        let seed = match gen.carrier {
            Carrier::Noise { seed } => seed,
            Carrier::Sinusoid { .. } => 0,
        };
        DisturbanceSource {
            gen: gen.clone(),
            ts,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: [[0.0; 4]; DOF],
            coef: highpass_biquad(gen.cutoff, ts),
            step: 0,
        }
    }

    pub fn next(&mut self) -> Wrench {
        let t = self.step as f64 * self.ts;
        self.step += 1;
        let mut f = Vec6::zeros();
        if !self.gen.enabled {
            return Wrench(f);
        }
        match self.gen.carrier {
            Carrier::Sinusoid { hz } => {
                let s = self.gen.amplitude * (2.0 * PI * hz * t).sin();
                for i in 0..DOF {
                    if self.gen.axes[i] {
                        f[i] = s;
                    }
                }
            }
            Carrier::Noise { .. } => {
                let [b0, b1, b2, a1, a2] = self.coef;
                for i in 0..DOF {
                    let x: f64 = StandardNormal.sample(&mut self.rng);
                    let [x1, x2, y1, y2] = self.state[i];
                    let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
                    self.state[i] = [x, x1, y, y1];
                    if self.gen.axes[i] {
                        f[i] = self.gen.amplitude * y;
                    }
                }
            }
        }
        Wrench(f)
    }
}

/// Second-order Butterworth high-pass via the bilinear transform with prewarping.
fn highpass_biquad(cutoff: f64, ts: f64) -> [f64; 5] {
    let k = (cutoff * ts / 2.0).tan();
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let b0 = norm;
    [b0, -2.0 * b0, b0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm]
}
