use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admittance::ImpedanceParams;
use crate::error::{Error, Result};
use crate::gp::MeanKind;
use crate::mpc::MpcConfig;
use crate::sim::disturbance::DisturbanceGen;
use crate::sim::env::ContactEnv;
use crate::sim::human::SyntheticHuman;
use crate::types::{Vec6, DOF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    /// Inner admittance loop period [s].
    pub ts: f64,
    /// First-order lag between commanded and actual TCP position [s]; 0 disables it.
    pub lag: f64,
    pub initial_pose: [f64; DOF],
    pub initial_velocity: [f64; DOF],
    /// Impedance used before the first plan and whenever the planner is off.
    pub mass: [f64; DOF],
    pub damping: [f64; DOF],
    /// Force sensor noise standard deviation [N].
    pub force_noise: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        RobotConfig {
            ts: 0.002,
            lag: 0.0,
            initial_pose: [0.0; DOF],
            initial_velocity: [0.0; DOF],
            mass: [10.0; DOF],
            damping: [500.0; DOF],
            force_noise: 0.0,
        }
    }
}

impl RobotConfig {
    pub fn impedance(&self) -> ImpedanceParams {
        ImpedanceParams { mass: Vec6::from(self.mass), damping: Vec6::from(self.damping), stiffness: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub walls: Vec<ContactEnv>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub enabled: bool,
    /// Planner update rate [Hz].
    pub rate: f64,
    pub belief_floor: f64,
    pub planner: MpcConfig,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection { enabled: true, rate: 15.0, belief_floor: crate::belief::DEFAULT_FLOOR, planner: MpcConfig::default() }
    }
}

/// Scripted guided sweeps used to record demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub count: usize,
    /// Linear TCP waypoints after the start pose; empty means "straight to the goal".
    pub waypoints: Vec<[f64; 3]>,
    /// Duration of each segment [s].
    pub segment_time: f64,
    /// Rest at each waypoint [s].
    pub dwell: f64,
    /// Half-range of the per-demo random start offset [m].
    pub start_jitter: [f64; 3],
    /// Half-range of a per-demo shift applied to the goal and every waypoint [m].
    pub task_jitter: [f64; 3],
    /// Sensor noise standard deviation [N].
    pub force_noise: f64,
    /// Record the guiding human force in addition to contact forces.
    pub include_human: bool,
    /// Largest contact force [N] the demonstrator applies. Past it the tool
    /// stays on the wall surface, pressing with a slowly varying effort.
    pub max_contact_force: Option<f64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            count: 3,
            waypoints: vec![],
            segment_time: 1.0,
            dwell: 0.2,
            start_jitter: [0.0; 3],
            task_jitter: [0.0; 3],
            force_noise: 0.5,
            include_human: true,
            max_contact_force: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    /// Model files, relative to the scenario file.
    pub models: Vec<PathBuf>,
    pub mean: MeanKind,
    /// Force axes that get a hinge mean when `mean = "hinge"`; empty means all.
    pub hinge_axes: Vec<usize>,
    /// Training points kept per model after subsampling.
    pub max_points: usize,
    pub demos: DemoConfig,
}

impl Default for GpSection {
    fn default() -> Self {
        GpSection { models: vec![], mean: MeanKind::Zero, hinge_axes: vec![], max_points: 120, demos: DemoConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// [s]
    pub duration: f64,
    pub seed: u64,
    pub robot: RobotConfig,
    pub environment: EnvironmentConfig,
    pub human: SyntheticHuman,
    pub disturbance: DisturbanceGen,
    pub mpc: MpcSection,
    pub gp: GpSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            duration: 1.0,
            seed: 0,
            robot: RobotConfig::default(),
            environment: EnvironmentConfig::default(),
            human: SyntheticHuman::default(),
            disturbance: DisturbanceGen::default(),
            mpc: MpcSection::default(),
            gp: GpSection::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        let r = &self.robot;
        if !(r.ts > 0.0 && r.lag >= 0.0 && r.force_noise >= 0.0) {
            return Err(Error::Config("robot ts must be positive, lag and force_noise non-negative".into()));
        }
        r.impedance().validate()?;
        for w in &self.environment.walls {
            w.validate()?;
        }
        self.human.validate()?;
        self.disturbance.validate()?;
        if self.mpc.enabled {
            if !(self.mpc.rate > 0.0 && self.mpc.rate <= 1.0 / r.ts) {
                return Err(Error::Config("mpc rate must be positive and no faster than the inner loop".into()));
            }
            self.mpc.planner.validate()?;
        }
        if !(0.0..1.0).contains(&self.mpc.belief_floor) {
            return Err(Error::Config("belief_floor must be in [0, 1)".into()));
        }
        if self.gp.hinge_axes.iter().any(|a| *a >= DOF) {
            return Err(Error::Config("hinge axis out of range".into()));
        }
        if self.gp.max_points == 0 || self.gp.demos.count == 0 {
            return Err(Error::Config("max_points and demo count must be positive".into()));
        }
        Ok(())
    }

    /// Parse with strict key checking.
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    /// Load from a file and resolve model paths against its directory.
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        let mut sc = Scenario::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for m in sc.gp.models.iter_mut() {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(sc)
    }

    pub fn inner_steps(&self) -> usize {
        (self.duration / self.robot.ts).round() as usize
    }

    /// Inner steps between planner updates.
    pub fn mpc_period_steps(&self) -> usize {
        ((1.0 / (self.mpc.rate * self.robot.ts)).round() as usize).max(1)
    }
}
