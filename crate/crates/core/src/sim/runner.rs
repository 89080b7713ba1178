use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::admittance::ImpedanceParams;
use crate::belief::{self, Belief};
use crate::error::{Error, Result};
use crate::gp::GpForceModel;
use crate::mpc::{build_problem, solve, MpcSolution, SolutionAudit};
use crate::sim::disturbance::DisturbanceSource;
use crate::sim::env::{total_contact_force, ContactEnv};
use crate::sim::human::human_force;
use crate::sim::log::{LogRow, PlanStatus, RunLog};
use crate::sim::scenario::Scenario;
use crate::types::{Pose, Vec6, Wrench};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Solve the planner synchronously every few inner steps (deterministic).
    /// Otherwise it runs on a worker thread against a real-time inner loop.
    pub lockstep: bool,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
}

/// Per-solve record kept beside the log.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRecord {
    pub t: f64,
    /// Wall-clock time of the solve [s].
    pub solve_time: f64,
    pub iterations: usize,
    pub status: PlanStatus,
    pub impedance: ImpedanceParams,
    pub audit: SolutionAudit,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: RunLog,
    /// Solver statistics; wall-clock times are kept out of the log so it stays reproducible.
    pub plans: Vec<PlanRecord>,
}

/// Plan currently executed by the inner loop.
#[derive(Clone, Debug)]
struct ActivePlan {
    t: f64,
    sol: MpcSolution,
    belief: Vec<f64>,
}

impl ActivePlan {
    fn force_ref(&self, t: f64, planner_ts: f64) -> Vec6 {
        let k = (((t - self.t) / planner_ts) + 1e-9).floor().max(0.0) as usize;
        self.sol.force_ref.get(k.min(self.sol.force_ref.len().saturating_sub(1))).copied().unwrap_or_else(Vec6::zeros)
    }
}

/// Planner state carried between solves.
struct Planner<'a> {
    sc: &'a Scenario,
    models: &'a [GpForceModel],
    belief: Belief,
    previous: Option<MpcSolution>,
}

impl<'a> Planner<'a> {
    fn new(sc: &'a Scenario, models: &'a [GpForceModel]) -> Result<Self> {
        Ok(Planner { sc, models, belief: Belief::uniform(models.len())?, previous: None })
    }

    /// Belief update from the measured force, then one MPC solve.
    fn step(&mut self, t: f64, pose: &Pose, vel: &Vec6, force: &Wrench, phi: &ImpedanceParams) -> (ActivePlan, PlanRecord) {
        let cfg = &self.sc.mpc.planner;
        if self.models.len() > 1 {
            match belief::update(&self.belief, force, pose, self.models)
                .and_then(|b| belief::decay_floor(&b, self.sc.mpc.belief_floor))
            {
                Ok(b) => self.belief = b,
                Err(e) => log::warn!("belief update skipped at t = {t:.3}: {e}"),
            }
        }
        let t0 = Instant::now();
        let sol = build_problem(cfg, pose, vel, &self.belief, self.models, phi)
            .and_then(|p| solve(&p, self.previous.as_ref()))
            .unwrap_or_else(|e| {
                log::warn!("planner failed at t = {t:.3}: {e}");
                MpcSolution::fallback(cfg, phi, self.previous.as_ref(), cfg.horizon)
            });
        let timing = PlanRecord {
            t,
            solve_time: t0.elapsed().as_secs_f64(),
            iterations: sol.iterations,
            status: sol.status.into(),
            impedance: sol.impedance,
            audit: sol.audit.clone(),
        };
        self.previous = Some(sol.clone());
        (ActivePlan { t, sol, belief: self.belief.probs().to_vec() }, timing)
    }
}

/// Simulated plant: admittance state, lagged robot, environment, human, disturbance.
struct Plant<'a> {
    sc: &'a Scenario,
    walls: Vec<ContactEnv>,
    disturbance: DisturbanceSource,
    rng: ChaCha8Rng,
    x_cmd: Vec6,
    v_cmd: Vec6,
    x: Vec6,
    v: Vec6,
}

struct Forces {
    human: Vec6,
    contact: Vec6,
    disturbance: Vec6,
    measured: Vec6,
}

impl<'a> Plant<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let walls = sc.environment.walls.iter().map(|w| w.sample_episode(&mut rng)).collect();
        let x = Vec6::from(sc.robot.initial_pose);
        let v = Vec6::from(sc.robot.initial_velocity);
        Plant { sc, walls, disturbance: DisturbanceSource::new(&sc.disturbance, sc.robot.ts), rng, x_cmd: x, v_cmd: v, x, v }
    }

    fn forces(&mut self, t: f64) -> Forces {
        let mut human = human_force(&self.sc.human, &self.x, &self.v, t).0;
        let hn = self.sc.human.noise;
        let sn = self.sc.robot.force_noise;
        if hn > 0.0 {
            let n = Normal::new(0.0, hn).expect("valid noise");
            for i in 0..3 {
                human[i] += n.sample(&mut self.rng);
            }
        }
        let contact = total_contact_force(&self.walls, &self.x, &self.v).0;
        let disturbance = self.disturbance.next().0;
        let mut measured = human + contact + disturbance;
        if sn > 0.0 {
            let n = Normal::new(0.0, sn).expect("valid noise");
            for i in 0..3 {
                measured[i] += n.sample(&mut self.rng);
            }
        }
        Forces { human, contact, disturbance, measured }
    }

    /// Semi-implicit admittance step, then the robot's position lag.
    fn advance(&mut self, f: &Vec6, f_ref: &Vec6, phi: &ImpedanceParams) {
        let ts = self.sc.robot.ts;
        for i in 0..6 {
            let (m, d) = (phi.mass[i], phi.damping[i]);
            self.v_cmd[i] = (m * self.v_cmd[i] + ts * (f[i] - f_ref[i])) / (m + ts * d);
            self.x_cmd[i] += ts * self.v_cmd[i];
        }
        let lag = self.sc.robot.lag;
        let gain = if lag > 0.0 { 1.0 - (-ts / lag).exp() } else { 1.0 };
        let next = self.x + (self.x_cmd - self.x) * gain;
        self.v = (next - self.x) / ts;
        self.x = next;
    }
}

fn check_models(sc: &Scenario, models: &[GpForceModel]) -> Result<()> {
    if sc.mpc.enabled && models.is_empty() {
        return Err(Error::Config(format!("scenario `{}` runs the planner but no force models were given", sc.name)));
    }
    Ok(())
}

/// Closed-loop episode of the admittance inner loop with the planner.
pub fn run_episode(sc: &Scenario, models: &[GpForceModel], opts: &RunOptions) -> Result<RunOutput> {
    sc.validate()?;
    check_models(sc, models)?;
    if opts.lockstep || !sc.mpc.enabled {
        run_lockstep(sc, models, opts.seed.unwrap_or(sc.seed))
    } else {
        run_threaded(sc, models, opts.seed.unwrap_or(sc.seed))
    }
}

fn row(t: f64, plant: &Plant, f: &Forces, f_ref: Vec6, phi: &ImpedanceParams, belief: &[f64], status: PlanStatus, mpc_step: bool) -> LogRow {
    LogRow {
        t,
        x: plant.x,
        v: plant.v,
        f_human: f.human,
        f_contact: f.contact,
        f_disturbance: f.disturbance,
        f_total: f.measured,
        f_ref,
        mass: phi.mass,
        damping: phi.damping,
        belief: belief.to_vec(),
        status,
        mpc_step,
    }
}

fn run_lockstep(sc: &Scenario, models: &[GpForceModel], seed: u64) -> Result<RunOutput> {
    let mut plant = Plant::new(sc, seed);
    let modes = models.len().max(1);
    let mut planner = if sc.mpc.enabled { Some(Planner::new(sc, models)?) } else { None };
    let period = sc.mpc_period_steps();
    let base_phi = sc.robot.impedance();
    let mut plan: Option<ActivePlan> = None;
    let mut rows = Vec::with_capacity(sc.inner_steps());
    let mut timing = Vec::new();
    let uniform = vec![1.0 / modes as f64; modes];
    for i in 0..sc.inner_steps() {
        let t = i as f64 * sc.robot.ts;
        let f = plant.forces(t);
        let mut mpc_step = false;
        if let Some(pl) = planner.as_mut() {
            if i % period == 0 {
                let phi = plan.as_ref().map_or(base_phi, |p| p.sol.impedance);
                let (p, tm) = pl.step(t, &Pose(plant.x), &plant.v, &Wrench(f.measured), &phi);
                plan = Some(p);
                timing.push(tm);
                mpc_step = true;
            }
        }
        let (f_ref, phi, belief, status) = match &plan {
            Some(p) => (p.force_ref(t, sc.mpc.planner.ts), p.sol.impedance, p.belief.as_slice(), p.sol.status.into()),
            None => (Vec6::zeros(), base_phi, uniform.as_slice(), PlanStatus::None),
        };
        rows.push(row(t, &plant, &f, f_ref, &phi, belief, status, mpc_step));
        plant.advance(&f.measured, &f_ref, &phi);
    }
    Ok(RunOutput { log: RunLog { modes, rows }, plans: timing })
}

struct Snapshot {
    t: f64,
    pose: Pose,
    vel: Vec6,
    force: Wrench,
    phi: ImpedanceParams,
}

fn run_threaded(sc: &Scenario, models: &[GpForceModel], seed: u64) -> Result<RunOutput> {
    let mut plant = Plant::new(sc, seed);
    let modes = models.len().max(1);
    let base_phi = sc.robot.impedance();
    let latest_state: Mutex<Option<Snapshot>> = Mutex::new(None);
    let latest_plan: Mutex<Option<Arc<ActivePlan>>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let timing: Mutex<Vec<PlanRecord>> = Mutex::new(Vec::new());
    let period = 1.0 / sc.mpc.rate;
    let uniform = vec![1.0 / modes as f64; modes];

    let rows = std::thread::scope(|scope| -> Result<Vec<LogRow>> {
        scope.spawn(|| {
            let mut planner = match Planner::new(sc, models) {
                Ok(p) => p,
                Err(e) => {
                    log::error!("planner worker failed to start: {e}");
                    return;
                }
            };
            let mut next_due = 0.0;
            while !stop.load(Ordering::Acquire) {
                let snap = latest_state.lock().expect("state lock").take();
                match snap {
                    Some(s) if s.t + 1e-12 >= next_due => {
                        let (plan, tm) = planner.step(s.t, &s.pose, &s.vel, &s.force, &s.phi);
                        *latest_plan.lock().expect("plan lock") = Some(Arc::new(plan));
                        timing.lock().expect("timing lock").push(tm);
                        next_due = s.t + period;
                    }
                    _ => std::thread::sleep(Duration::from_micros(200)),
                }
            }
        });

        let start = Instant::now();
        let mut rows = Vec::with_capacity(sc.inner_steps());
        let mut current: Option<Arc<ActivePlan>> = None;
        for i in 0..sc.inner_steps() {
            let t = i as f64 * sc.robot.ts;
            let due = start + Duration::from_secs_f64(t);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            let f = plant.forces(t);
            let newest = latest_plan.lock().expect("plan lock").clone();
            let mpc_step = match (&newest, &current) {
                (Some(a), Some(b)) => !Arc::ptr_eq(a, b),
                (Some(_), None) => true,
                _ => false,
            };
            current = newest;
            let (f_ref, phi, belief, status) = match &current {
                Some(p) => (p.force_ref(t, sc.mpc.planner.ts), p.sol.impedance, p.belief.as_slice(), p.sol.status.into()),
                None => (Vec6::zeros(), base_phi, uniform.as_slice(), PlanStatus::None),
            };
            *latest_state.lock().expect("state lock") =
                Some(Snapshot { t, pose: Pose(plant.x), vel: plant.v, force: Wrench(f.measured), phi });
            rows.push(row(t, &plant, &f, f_ref, &phi, belief, status, mpc_step));
            plant.advance(&f.measured, &f_ref, &phi);
        }
        stop.store(true, Ordering::Release);
        Ok(rows)
    })?;
    Ok(RunOutput { log: RunLog { modes, rows }, plans: timing.into_inner().expect("timing lock") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpHyper;
    use crate::sim::env::ContactEnv;

    fn quiet() -> Scenario {
        let mut sc = Scenario { duration: 0.5, ..Default::default() };
        sc.human.kp = 0.0;
        sc.mpc.enabled = false;
        sc
    }

    #[test]
    fn at_rest_stays_at_rest() {
        let out = run_episode(&quiet(), &[], &RunOptions { lockstep: true, seed: None }).unwrap();
        assert_eq!(out.log.rows.len(), 250);
        assert!(out.log.rows.iter().all(|r| r.x == Vec6::zeros() && r.v == Vec6::zeros()));
    }

    #[test]
    fn free_motion_energy_decreases() {
        let mut sc = quiet();
        sc.robot.initial_velocity = [0.3, -0.2, 0.1, 0.0, 0.0, 0.0];
        sc.robot.lag = 0.0;
        for scheme_damping in [0.0, 50.0, 500.0] {
            sc.robot.damping = [scheme_damping; 6];
            let out = run_episode(&sc, &[], &RunOptions { lockstep: true, seed: None }).unwrap();
            let ke: Vec<f64> = out.log.rows.iter().map(|r| 0.5 * r.v.dot(&r.v.component_mul(&r.mass))).collect();
            assert!(ke.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn contact_is_unilateral_at_every_step() {
        let mut sc = quiet();
        sc.duration = 1.0;
        sc.human.kp = 2000.0;
        sc.human.goals = vec![[0.02, 0.0, 0.0]];
        sc.robot.lag = 0.01;
        sc.robot.damping = [200.0; 6];
        sc.environment.walls = vec![ContactEnv { stiffness: 126_000.0, location: 0.005, ..Default::default() }];
        let out = run_episode(&sc, &[], &RunOptions { lockstep: true, seed: None }).unwrap();
        assert!(out.log.rows.iter().any(|r| r.f_contact[0] < 0.0));
        assert!(out.log.rows.iter().all(|r| r.f_contact[0] <= 0.0));
    }

    #[test]
    fn planner_runs_in_lockstep_deterministically() {
        let mut sc = quiet();
        sc.mpc.enabled = true;
        sc.human.kp = 300.0;
        sc.human.goals = vec![[0.05, 0.0, 0.0]];
        sc.human.noise = 0.5;
        sc.robot.force_noise = 0.2;
        let models = vec![GpForceModel::prior(GpHyper::default())];
        let a = run_episode(&sc, &models, &RunOptions { lockstep: true, seed: Some(4) }).unwrap();
        let b = run_episode(&sc, &models, &RunOptions { lockstep: true, seed: Some(4) }).unwrap();
        assert_eq!(a.log, b.log);
        let solves = a.log.rows.iter().filter(|r| r.mpc_step).count();
        assert_eq!(solves, sc.inner_steps().div_ceil(sc.mpc_period_steps()));
        assert!(a.log.rows.iter().skip(1).all(|r| r.status != PlanStatus::None));
    }

    #[test]
    fn threaded_mode_produces_plans() {
        let mut sc = quiet();
        sc.mpc.enabled = true;
        sc.duration = 0.4;
        let models = vec![GpForceModel::prior(GpHyper::default())];
        let out = run_episode(&sc, &models, &RunOptions::default()).unwrap();
        assert_eq!(out.log.rows.len(), 200);
        assert!(out.log.rows.iter().any(|r| r.mpc_step));
        assert!(!out.plans.is_empty());
    }

    #[test]
    fn planner_without_models_is_a_config_error() {
        let mut sc = quiet();
        sc.mpc.enabled = true;
        assert!(matches!(run_episode(&sc, &[], &RunOptions::default()), Err(Error::Config(_))));
    }
}
