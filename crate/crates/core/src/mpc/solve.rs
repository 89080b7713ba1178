use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admittance::ImpedanceParams;
use crate::error::Result;
use crate::mpc::config::MpcConfig;
use crate::mpc::ipm::{solve_nlp, Nlp, SolveStatus};
use crate::mpc::problem::{MpcProblem, NODE_DIM};
use crate::types::{Pose, Vec6, DOF};

/// Post-hoc check of the returned plan against the exact constraint forms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionAudit {
    /// Largest scaled continuity residual.
    pub continuity: f64,
    /// Smallest chance-constraint residual in newtons, if the constraint is active.
    pub chance_min: Option<f64>,
    /// Smallest well-damped residual in Ns/m along the rollout, if the constraint is active.
    pub well_damped_min: Option<f64>,
    pub ok: bool,
}

/// Which constraints bind at the solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintActivity {
    pub force_ref_bound: bool,
    pub impedance_bound: bool,
    pub chance: bool,
    pub well_damped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// Force reference for each step of the horizon.
    pub force_ref: Vec<Vec6>,
    pub impedance: ImpedanceParams,
    pub delta_mass: Vec6,
    pub delta_damping: Vec6,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub activity: ConstraintActivity,
    pub audit: SolutionAudit,
    /// Planned mean poses of the most likely mode, one per node after the first.
    pub planned_poses: Vec<Pose>,
    pub solve_time: f64,
}

impl MpcSolution {
    /// Safe fallback for an infeasible step: hold the previous force
    /// reference, keep the mass, and raise damping toward its ceiling.
    pub fn fallback(cfg: &MpcConfig, phi: &ImpedanceParams, previous: Option<&MpcSolution>, horizon: usize) -> MpcSolution {
        let held = previous.and_then(|p| p.force_ref.get(1).or(p.force_ref.first())).copied().unwrap_or_else(Vec6::zeros);
        let mut delta_damping = Vec6::zeros();
        let mut impedance = *phi;
        for a in 0..DOF {
            let target = (phi.damping[a] + cfg.limits.damping_rate[a]).min(cfg.limits.damping_max[a]).max(cfg.limits.damping_min[a]);
            delta_damping[a] = target - phi.damping[a];
            impedance.damping[a] = target;
            let m = phi.mass[a].clamp(cfg.limits.mass_min[a], cfg.limits.mass_max[a]);
            impedance.mass[a] = m;
        }
        MpcSolution {
            force_ref: vec![held; horizon],
            delta_mass: impedance.mass - phi.mass,
            impedance,
            delta_damping,
            status: SolveStatus::Infeasible,
            iterations: 0,
            objective: f64::NAN,
            activity: ConstraintActivity::default(),
            audit: SolutionAudit::default(),
            planned_poses: vec![],
            solve_time: 0.0,
        }
    }
}

/// Solve a built problem. `warm_start` seeds the force reference from the
/// previous plan shifted by one step.
pub fn solve(problem: &MpcProblem, warm_start: Option<&MpcSolution>) -> Result<MpcSolution> {
    let t0 = Instant::now();
    let z0 = problem.initial_point(warm_start.map(|w| w.force_ref.as_slice()));
    let res = solve_nlp(problem, &z0, &problem.cfg.solver)?;
    let mut sol = decode_solution(problem, &res.x)?;
    sol.status = res.status;
    sol.iterations = res.iterations;
    sol.objective = res.f;
    if res.status == SolveStatus::Infeasible {
        let mut fb = MpcSolution::fallback(&problem.cfg, &problem.phi, warm_start, problem.horizon());
        fb.iterations = res.iterations;
        fb.audit = sol.audit;
        fb.solve_time = t0.elapsed().as_secs_f64();
        return Ok(fb);
    }
    sol.solve_time = t0.elapsed().as_secs_f64();
    Ok(sol)
}

/// Physical plan, activity flags, and audit for a scaled decision vector.
pub fn decode_solution(problem: &MpcProblem, z: &[f64]) -> Result<MpcSolution> {
    let cfg = &problem.cfg;
    let ns = problem.n_state();
    let (lo, hi) = problem.free_box();
    let zf = problem.clamp_free(&z[ns..]);
    let inp = problem.decode_free(&zf);
    let axes = problem.active_axes();
    let h = problem.horizon();

    let mut force_ref = vec![Vec6::zeros(); h];
    for (k, fr) in force_ref.iter_mut().enumerate() {
        for (ai, &a) in axes.iter().enumerate() {
            fr[a] = inp.force_ref[k][ai];
        }
    }
    let mut impedance = problem.phi;
    let mut delta_mass = Vec6::zeros();
    let mut delta_damping = Vec6::zeros();
    for (ai, &a) in axes.iter().enumerate() {
        delta_mass[a] = inp.delta_mass[ai];
        delta_damping[a] = inp.delta_damping[ai];
        impedance.mass[a] += inp.delta_mass[ai];
        impedance.damping[a] += inp.delta_damping[ai];
    }

    let mut activity = ConstraintActivity::default();
    let tight = 1e-4;
    for j in 0..zf.len() {
        if zf[j] - lo[j] < tight || hi[j] - zf[j] < tight {
            if j < h * axes.len() {
                activity.force_ref_bound = true;
            } else {
                activity.impedance_bound = true;
            }
        }
    }

    let ev = problem.eval(&{
        let mut zz = z[..ns].to_vec();
        zz.extend_from_slice(&zf);
        zz
    })?;
    let continuity = ev.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let st = problem.states_phys(z);
    let node_pose = |n: usize, k: usize| {
        let mut x = problem.pose;
        for (ai, &a) in axes.iter().enumerate() {
            x.0[a] = st[problem.state_index(n, k, ai, 0)];
        }
        x
    };

    let mut chance_min: Option<f64> = None;
    if cfg.chance.enabled {
        for n in 0..problem.modes() {
            if problem.belief[n] < cfg.chance.min_belief {
                continue;
            }
            let x = node_pose(n, h);
            for &a in axes {
                let sign = cfg.chance.sign[a];
                if sign == 0.0 {
                    continue;
                }
                let (mu, var) = problem.models[n].axis(a).predict(&x);
                let r = cfg.chance.f_bar - problem.kappa() * var.sqrt() - sign * mu;
                chance_min = Some(chance_min.map_or(r, |c| c.min(r)));
            }
        }
        if let Some(r) = chance_min {
            activity.chance = r < tight * cfg.chance.f_bar.abs().max(1.0) * 10.0;
        }
    }
    let mut wd_min: Option<f64> = None;
    if cfg.well_damped.enabled {
        let n = problem.wd_mode();
        for k in 1..=h {
            let x = node_pose(n, k);
            for &a in axes {
                if !cfg.well_damped.axes[a] {
                    continue;
                }
                let ke = problem.models[n].estimate_stiffness(&x, a);
                let r = crate::mpc::costs::well_damped_residual(impedance.damping[a], impedance.mass[a], ke, cfg.well_damped.zeta);
                wd_min = Some(wd_min.map_or(r, |c| c.min(r)));
            }
        }
        if let Some(r) = wd_min {
            activity.well_damped = r < 1e-2 * impedance.damping.max().max(1.0);
        }
    }
    let tol_c = cfg.continuity_tol.max(cfg.solver.primal_tol) * 10.0;
    let ok = continuity <= tol_c
        && chance_min.is_none_or(|r| r >= -1e-3 * cfg.chance.f_bar.abs().max(1.0))
        && wd_min.is_none_or(|r| r >= -1e-3 * impedance.damping.max().max(1.0));
    let planned_poses = (1..=h).map(|k| node_pose(problem.wd_mode(), k)).collect();
    debug_assert_eq!(ns % NODE_DIM, 0);

    Ok(MpcSolution {
        force_ref,
        impedance,
        delta_mass,
        delta_damping,
        status: SolveStatus::Converged,
        iterations: 0,
        objective: ev.f,
        activity,
        audit: SolutionAudit { continuity, chance_min, well_damped_min: wd_min, ok },
        planned_poses,
        solve_time: 0.0,
    })
}
