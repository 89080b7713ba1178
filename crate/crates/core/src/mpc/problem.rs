//! Multiple-shooting transcription of the belief-weighted planning problem.
//!
//! Every mode carries its own shooting nodes. With zero initial covariance and
//! diagonal dynamics the state covariance stays block-diagonal per axis, so a
//! node stores `(pos, vel, P, C, V)` per active axis: the mean and the
//! position variance, position-velocity covariance, and velocity variance.
//! Decision variables are the force reference at each step plus one mass and
//! damping change shared by the whole horizon.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::admittance::{velocity_decay, velocity_decay_grad, ImpedanceParams};
use crate::belief::Belief;
use crate::error::{Error, Result};
use crate::gp::GpForceModel;
use crate::human_arm::ik_simplified_clamped;
use crate::mpc::config::MpcConfig;
use crate::mpc::costs::{chance_kappa, h2_disturbance_cost_grad, torque_metric};
use crate::mpc::ipm::{Nlp, NlpEval};
use crate::types::{Pose, Vec6, DOF};

pub(crate) const NODE_DIM: usize = 5;
const POS: usize = 0;
const VEL: usize = 1;
const PP: usize = 2;
const PV: usize = 3;
const VV: usize = 4;

const FORCE_REF_SCALE: f64 = 10.0;
const POS_SCALE: f64 = 1e-2;
const VEL_SCALE: f64 = 1e-1;
const VAR_FLOOR: f64 = 1e-12;

/// Sizes of the decision vector blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub force_ref: usize,
    pub delta_mass: usize,
    pub delta_damping: usize,
    pub states: usize,
    pub slacks: usize,
}

impl DecisionLayout {
    pub fn total(&self) -> usize {
        self.force_ref + self.delta_mass + self.delta_damping + self.states + self.slacks
    }
}

#[derive(Clone, Copy, Debug)]
struct GpNode {
    mean: f64,
    var: f64,
    dmean: Vec6,
    dvar: Vec6,
}

#[derive(Clone, Copy, Debug)]
enum Ineq {
    Lower(usize, f64),
    Upper(usize, f64),
    Chance { mode: usize, ai: usize },
    WellDamped { k: usize, ai: usize },
}

/// Physical values of the free variables.
#[derive(Clone, Debug)]
pub(crate) struct Inputs {
    /// `[step][active axis]`
    pub force_ref: Vec<Vec<f64>>,
    pub delta_mass: Vec<f64>,
    pub delta_damping: Vec<f64>,
}

/// Built planning problem for one control step.
pub struct MpcProblem<'a> {
    pub(crate) cfg: MpcConfig,
    pub(crate) models: &'a [GpForceModel],
    pub(crate) belief: Vec<f64>,
    pub(crate) pose: Pose,
    pub(crate) vel: Vec6,
    pub(crate) phi: ImpedanceParams,
    pub(crate) axes: Vec<usize>,
    h: usize,
    na: usize,
    nm: usize,
    n_fr: usize,
    mass_idx: Vec<Option<usize>>,
    damp_idx: Vec<Option<usize>>,
    n_free: usize,
    /// Box on each free variable in scaled units.
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Physical delta used for axes whose mass or damping is not free.
    fixed_dm: Vec<f64>,
    fixed_dd: Vec<f64>,
    dm_scale: Vec<f64>,
    dd_scale: Vec<f64>,
    pub(crate) state_ref: Vec<f64>,
    pub(crate) state_scale: Vec<f64>,
    ineqs: Vec<Ineq>,
    kappa: f64,
    wd_mode: usize,
    arm_metric: Option<Matrix3<f64>>,
}

fn delta_box(cur: f64, min: f64, max: f64, rate: f64) -> (f64, f64) {
    let lo = (min - cur).max(-rate);
    let hi = (max - cur).min(rate);
    if lo <= hi {
        (lo, hi)
    } else if cur < min {
        (min - cur, min - cur)
    } else {
        (max - cur, max - cur)
    }
}

/// Build the planning problem at the current pose and velocity.
pub fn build_problem<'a>(
    cfg: &MpcConfig,
    pose: &Pose,
    vel: &Vec6,
    belief: &Belief,
    models: &'a [GpForceModel],
    phi: &ImpedanceParams,
) -> Result<MpcProblem<'a>> {
    cfg.validate()?;
    phi.validate()?;
    if models.is_empty() || models.len() != belief.len() {
        return Err(Error::Dimension(format!("{} models for a belief over {} modes", models.len(), belief.len())));
    }
    if !pose.is_finite() || vel.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite robot state".into()));
    }
    let axes = cfg.active_axes.clone();
    let (h, na, nm) = (cfg.horizon, axes.len(), models.len());
    let n_fr = h * na;
    let lim = &cfg.limits;

    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for _ in 0..h {
        for &a in &axes {
            lo.push(cfg.force_ref_min[a] / FORCE_REF_SCALE);
            hi.push(cfg.force_ref_max[a] / FORCE_REF_SCALE);
        }
    }
    let mut next = n_fr;
    let mut mass_idx = vec![None; na];
    let mut damp_idx = vec![None; na];
    let mut fixed_dm = vec![0.0; na];
    let mut fixed_dd = vec![0.0; na];
    let mut dm_scale = vec![1.0; na];
    let mut dd_scale = vec![1.0; na];
    for (ai, &a) in axes.iter().enumerate() {
        let (l, u) = delta_box(phi.mass[a], lim.mass_min[a], lim.mass_max[a], lim.mass_rate[a]);
        dm_scale[ai] = l.abs().max(u.abs()).max(1e-6);
        if lim.optimize_mass && u - l > 1e-9 * dm_scale[ai] {
            mass_idx[ai] = Some(next);
            lo.push(l / dm_scale[ai]);
            hi.push(u / dm_scale[ai]);
            next += 1;
        } else {
            fixed_dm[ai] = 0.0f64.clamp(l, u);
        }
    }
    for (ai, &a) in axes.iter().enumerate() {
        let (l, u) = delta_box(phi.damping[a], lim.damping_min[a], lim.damping_max[a], lim.damping_rate[a]);
        dd_scale[ai] = l.abs().max(u.abs()).max(1e-6);
        if lim.optimize_damping && u - l > 1e-9 * dd_scale[ai] {
            damp_idx[ai] = Some(next);
            lo.push(l / dd_scale[ai]);
            hi.push(u / dd_scale[ai]);
            next += 1;
        } else {
            fixed_dd[ai] = 0.0f64.clamp(l, u);
        }
    }
    let n_free = next;

    let mut ineqs = Vec::new();
    for j in 0..n_free {
        ineqs.push(Ineq::Lower(j, lo[j]));
        ineqs.push(Ineq::Upper(j, hi[j]));
    }
    if cfg.chance.enabled {
        for (n, &b) in belief.probs().iter().enumerate() {
            if b < cfg.chance.min_belief {
                continue;
            }
            for (ai, &a) in axes.iter().enumerate() {
                if cfg.chance.sign[a] != 0.0 {
                    ineqs.push(Ineq::Chance { mode: n, ai });
                }
            }
        }
    }
    if cfg.well_damped.enabled {
        for k in 1..=h {
            for (ai, &a) in axes.iter().enumerate() {
                if cfg.well_damped.axes[a] {
                    ineqs.push(Ineq::WellDamped { k, ai });
                }
            }
        }
    }

    let arm_metric = if cfg.ergonomic.enabled {
        let hand = Vector3::new(pose[0], pose[1], pose[2]);
        let q = ik_simplified_clamped(&hand, &cfg.ergonomic.arm);
        Some(torque_metric(&q, &cfg.ergonomic.arm, &cfg.weights.q_tau))
    } else {
        None
    };

    let mut p = MpcProblem {
        kappa: chance_kappa(cfg.chance.eps, cfg.chance.strict_quantile),
        cfg: cfg.clone(),
        models,
        belief: belief.probs().to_vec(),
        pose: *pose,
        vel: *vel,
        phi: *phi,
        axes,
        h,
        na,
        nm,
        n_fr,
        mass_idx,
        damp_idx,
        n_free,
        lo,
        hi,
        fixed_dm,
        fixed_dd,
        dm_scale,
        dd_scale,
        state_ref: vec![],
        state_scale: vec![],
        ineqs,
        wd_mode: belief.argmax(),
        arm_metric,
    };
    let guess = p.clamp_free(&vec![0.0; n_free]);
    let inputs = p.decode_free(&guess);
    let traj = p.rollout_phys(&inputs);
    p.state_scale = p.scales_from(&traj);
    p.state_ref = traj;
    Ok(p)
}

impl<'a> MpcProblem<'a> {
    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout {
            force_ref: self.n_fr,
            delta_mass: self.mass_idx.iter().flatten().count(),
            delta_damping: self.damp_idx.iter().flatten().count(),
            states: self.n_state(),
            slacks: self.ineqs.len(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.h
    }

    pub fn active_axes(&self) -> &[usize] {
        &self.axes
    }

    pub fn modes(&self) -> usize {
        self.nm
    }

    pub(crate) fn state_index(&self, n: usize, k: usize, ai: usize, comp: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.h);
        ((n * self.h + (k - 1)) * self.na + ai) * NODE_DIM + comp
    }

    pub(crate) fn clamp_free(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(j, v)| v.clamp(self.lo[j], self.hi[j])).collect()
    }

    pub(crate) fn decode_free(&self, zf: &[f64]) -> Inputs {
        let force_ref = (0..self.h)
            .map(|k| (0..self.na).map(|ai| zf[k * self.na + ai] * FORCE_REF_SCALE).collect())
            .collect();
        let delta_mass = (0..self.na)
            .map(|ai| self.mass_idx[ai].map_or(self.fixed_dm[ai], |j| zf[j] * self.dm_scale[ai]))
            .collect();
        let delta_damping = (0..self.na)
            .map(|ai| self.damp_idx[ai].map_or(self.fixed_dd[ai], |j| zf[j] * self.dd_scale[ai]))
            .collect();
        Inputs { force_ref, delta_mass, delta_damping }
    }

    /// Scaled free variables from physical inputs, clamped to the box.
    pub(crate) fn encode_free(&self, force_ref: &[Vec6]) -> Vec<f64> {
        let mut z = vec![0.0; self.n_free];
        for k in 0..self.h {
            let fr = force_ref.get(k).or(force_ref.last());
            for (ai, &a) in self.axes.iter().enumerate() {
                z[k * self.na + ai] = fr.map_or(0.0, |f| f[a] / FORCE_REF_SCALE);
            }
        }
        self.clamp_free(&z)
    }

    fn impedance_of(&self, inp: &Inputs) -> (Vec<f64>, Vec<f64>) {
        let m = self.axes.iter().enumerate().map(|(ai, &a)| self.phi.mass[a] + inp.delta_mass[ai]).collect();
        let d = self.axes.iter().enumerate().map(|(ai, &a)| self.phi.damping[a] + inp.delta_damping[ai]).collect();
        (m, d)
    }

    fn node_pose(&self, states: &[f64], n: usize, k: usize) -> Pose {
        let mut x = self.pose;
        if k > 0 {
            for (ai, &a) in self.axes.iter().enumerate() {
                x.0[a] = states[self.state_index(n, k, ai, POS)];
            }
        }
        x
    }

    fn node_states(&self, states: &[f64], n: usize, k: usize, ai: usize) -> [f64; NODE_DIM] {
        if k == 0 {
            let a = self.axes[ai];
            [self.pose[a], self.vel[a], 0.0, 0.0, 0.0]
        } else {
            std::array::from_fn(|c| states[self.state_index(n, k, ai, c)])
        }
    }

    fn gp_node(&self, n: usize, x: &Pose, ai: usize) -> GpNode {
        let (mean, var, dmean, dvar) = self.models[n].axis(self.axes[ai]).predict_with_grad(x);
        GpNode { mean, var, dmean, dvar }
    }

    /// Forward simulation of all modes with the given inputs (physical units).
    pub(crate) fn rollout_phys(&self, inp: &Inputs) -> Vec<f64> {
        let ts = self.cfg.ts;
        let (m, d) = self.impedance_of(inp);
        let mut out = vec![0.0; self.n_state()];
        for n in 0..self.nm {
            for k in 1..=self.h {
                let x = self.node_pose(&out, n, k - 1);
                for ai in 0..self.na {
                    let s = self.node_states(&out, n, k - 1, ai);
                    let g = self.gp_node(n, &x, ai);
                    let a = velocity_decay(m[ai], d[ai], ts, self.cfg.scheme);
                    let b = ts / m[ai];
                    let next = [
                        s[POS] + ts * s[VEL],
                        a * s[VEL] + b * (g.mean - inp.force_ref[k - 1][ai]),
                        s[PP] + 2.0 * ts * s[PV] + ts * ts * s[VV],
                        a * (s[PV] + ts * s[VV]),
                        a * a * s[VV] + b * b * g.var,
                    ];
                    for (c, v) in next.iter().enumerate() {
                        out[self.state_index(n, k, ai, c)] = *v;
                    }
                }
            }
        }
        out
    }

    fn scales_from(&self, traj: &[f64]) -> Vec<f64> {
        let mut scale = vec![1.0; traj.len()];
        for n in 0..self.nm {
            for ai in 0..self.na {
                let mut mx = [0.0f64; NODE_DIM];
                for k in 1..=self.h {
                    for (c, v) in mx.iter_mut().enumerate() {
                        *v = v.max(traj[self.state_index(n, k, ai, c)].abs());
                    }
                }
                let pv = mx[PV].max((mx[PP] * mx[VV]).sqrt()).max(VAR_FLOOR);
                let s = [POS_SCALE, VEL_SCALE, mx[PP].max(VAR_FLOOR), pv, mx[VV].max(VAR_FLOOR)];
                for k in 1..=self.h {
                    for (c, v) in s.iter().enumerate() {
                        scale[self.state_index(n, k, ai, c)] = *v;
                    }
                }
            }
        }
        scale
    }

    pub(crate) fn states_phys(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_state()).map(|i| self.state_ref[i] + self.state_scale[i] * z[i]).collect()
    }

    /// Scaled decision vector for a warm start: inputs from the shifted
    /// previous plan and states from simulating them.
    pub fn initial_point(&self, warm_force_ref: Option<&[Vec6]>) -> Vec<f64> {
        let ns = self.n_state();
        let zf = match warm_force_ref {
            Some(fr) if !fr.is_empty() => {
                let shifted: Vec<Vec6> = fr.iter().skip(1).copied().collect();
                self.encode_free(if shifted.is_empty() { fr } else { &shifted })
            }
            _ => self.clamp_free(&vec![0.0; self.n_free]),
        };
        let inp = self.decode_free(&zf);
        let traj = self.rollout_phys(&inp);
        let mut z: Vec<f64> = (0..ns).map(|i| (traj[i] - self.state_ref[i]) / self.state_scale[i]).collect();
        z.extend_from_slice(&zf);
        z
    }

    /// Physical inputs of a scaled decision vector.
    pub(crate) fn inputs_of(&self, z: &[f64]) -> Inputs {
        self.decode_free(&z[self.n_state()..])
    }

    pub(crate) fn kappa(&self) -> f64 {
        self.kappa
    }

    pub(crate) fn wd_mode(&self) -> usize {
        self.wd_mode
    }

    /// Free-variable box in scaled units.
    pub fn free_box(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn chance_scale(&self) -> f64 {
        self.cfg.chance.f_bar.abs().max(1.0)
    }

    fn wd_scale(&self, ai: usize) -> f64 {
        self.phi.damping[self.axes[ai]].max(1.0)
    }

    /// Objective only, in physical units.
    pub fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(self.evaluate(z, false)?.f)
    }

    fn evaluate(&self, z: &[f64], derivs: bool) -> Result<NlpEval> {
        let ns = self.n_state();
        let nv = ns + self.n_free;
        if z.len() != nv {
            return Err(Error::Dimension(format!("decision vector has {} entries, expected {nv}", z.len())));
        }
        let cfg = &self.cfg;
        let w = &cfg.weights;
        let ts = cfg.ts;
        let (h, na) = (self.h, self.na);
        let inp = self.inputs_of(z);
        let (m, d) = self.impedance_of(&inp);
        let st = self.states_phys(z);
        let col_fr = |k: usize, ai: usize| ns + k * na + ai;
        let col_dm = |ai: usize| self.mass_idx[ai].map(|j| ns + j);
        let col_dd = |ai: usize| self.damp_idx[ai].map(|j| ns + j);

        let mut f = 0.0;
        let mut grad = DVector::zeros(if derivs { nv } else { 0 });
        let mut c = DVector::zeros(ns);
        let mut jc = DMatrix::zeros(if derivs { ns } else { 0 }, if derivs { nv } else { 0 });
        // gradient with respect to physical mass and damping, chained at the end
        let mut g_m = vec![0.0; na];
        let mut g_d = vec![0.0; na];

        let decay: Vec<(f64, f64, f64)> = (0..na)
            .map(|ai| {
                let a = velocity_decay(m[ai], d[ai], ts, cfg.scheme);
                let (am, ad) = velocity_decay_grad(m[ai], d[ai], ts, cfg.scheme);
                (a, am, ad)
            })
            .collect();

        let mut gp_final: Vec<Vec<GpNode>> = Vec::with_capacity(self.nm);
        let mut wd_nodes: Vec<Vec<(GpNode, Vec6)>> = Vec::new();

        for n in 0..self.nm {
            let bn = self.belief[n];
            let gps: Vec<Vec<GpNode>> = (0..=h)
                .map(|k| {
                    let x = self.node_pose(&st, n, k);
                    (0..na).map(|ai| self.gp_node(n, &x, ai)).collect()
                })
                .collect();
            if n == self.wd_mode && cfg.well_damped.enabled {
                wd_nodes = (0..=h)
                    .map(|k| {
                        let x = self.node_pose(&st, n, k);
                        (0..na)
                            .map(|ai| {
                                let a = self.axes[ai];
                                let hrow = if cfg.well_damped.axes[a] && k > 0 {
                                    self.models[n].axis(a).mean_hessian_row(&x, a)
                                } else {
                                    Vec6::zeros()
                                };
                                (gps[k][ai], hrow)
                            })
                            .collect()
                    })
                    .collect();
            }

            for k in 1..=h {
                // continuity from node k-1
                for ai in 0..na {
                    let s = self.node_states(&st, n, k - 1, ai);
                    let g = &gps[k - 1][ai];
                    let (a, am, ad) = decay[ai];
                    let b = ts / m[ai];
                    let bm = -ts / (m[ai] * m[ai]);
                    let fr = inp.force_ref[k - 1][ai];
                    let next = [
                        s[POS] + ts * s[VEL],
                        a * s[VEL] + b * (g.mean - fr),
                        s[PP] + 2.0 * ts * s[PV] + ts * ts * s[VV],
                        a * (s[PV] + ts * s[VV]),
                        a * a * s[VV] + b * b * g.var,
                    ];
                    for comp in 0..NODE_DIM {
                        let row = self.state_index(n, k, ai, comp);
                        c[row] = (st[row] - next[comp]) / self.state_scale[row];
                        if derivs {
                            jc[(row, row)] = 1.0;
                        }
                    }
                    if !derivs {
                        continue;
                    }
                    let sc = |row: usize| 1.0 / self.state_scale[row];
                    let r_pos = self.state_index(n, k, ai, POS);
                    let r_vel = self.state_index(n, k, ai, VEL);
                    let r_pp = self.state_index(n, k, ai, PP);
                    let r_pv = self.state_index(n, k, ai, PV);
                    let r_vv = self.state_index(n, k, ai, VV);
                    if k > 1 {
                        let prev = |comp: usize| self.state_index(n, k - 1, ai, comp);
                        let mut put = |row: usize, col: usize, dfdx: f64| {
                            jc[(row, col)] -= dfdx * self.state_scale[col] * sc(row);
                        };
                        put(r_pos, prev(POS), 1.0);
                        put(r_pos, prev(VEL), ts);
                        put(r_vel, prev(VEL), a);
                        put(r_pp, prev(PP), 1.0);
                        put(r_pp, prev(PV), 2.0 * ts);
                        put(r_pp, prev(VV), ts * ts);
                        put(r_pv, prev(PV), a);
                        put(r_pv, prev(VV), a * ts);
                        put(r_vv, prev(VV), a * a);
                        for aj in 0..na {
                            let pj = self.state_index(n, k - 1, aj, POS);
                            let ax = self.axes[aj];
                            put(r_vel, pj, b * g.dmean[ax]);
                            put(r_vv, pj, b * b * g.dvar[ax]);
                        }
                    }
                    jc[(r_vel, col_fr(k - 1, ai))] += b * FORCE_REF_SCALE * sc(r_vel);
                    if let Some(col) = col_dm(ai) {
                        let s_m = self.dm_scale[ai];
                        jc[(r_vel, col)] -= (am * s[VEL] + bm * (g.mean - fr)) * s_m * sc(r_vel);
                        jc[(r_pv, col)] -= am * (s[PV] + ts * s[VV]) * s_m * sc(r_pv);
                        jc[(r_vv, col)] -= (2.0 * a * am * s[VV] + 2.0 * b * bm * g.var) * s_m * sc(r_vv);
                    }
                    if let Some(col) = col_dd(ai) {
                        let s_d = self.dd_scale[ai];
                        jc[(r_vel, col)] -= ad * s[VEL] * s_d * sc(r_vel);
                        jc[(r_pv, col)] -= ad * (s[PV] + ts * s[VV]) * s_d * sc(r_pv);
                        jc[(r_vv, col)] -= 2.0 * a * ad * s[VV] * s_d * sc(r_vv);
                    }
                }

                // stage cost at node k
                if bn == 0.0 {
                    continue;
                }
                let mut fh = Vector3::zeros();
                for ai in 0..na {
                    let ax = self.axes[ai];
                    let s = self.node_states(&st, n, k, ai);
                    let g = &gps[k][ai];
                    let fr = inp.force_ref[k - 1][ai];
                    let e = if w.force_ref_offset { g.mean + fr } else { g.mean };
                    f += bn
                        * (w.q_mean[ax] * s[POS] * s[POS]
                            + w.q_mean[DOF + ax] * s[VEL] * s[VEL]
                            + w.q_cov[ax] * s[PP]
                            + w.q_cov[DOF + ax] * s[VV]
                            + w.q_force[ax] * e * e
                            + w.q_force_var[ax] * g.var);
                    if ax < 3 {
                        fh[ax] = d[ai] * s[VEL];
                    }
                    if derivs {
                        let ix = |comp: usize| self.state_index(n, k, ai, comp);
                        grad[ix(POS)] += bn * 2.0 * w.q_mean[ax] * s[POS] * self.state_scale[ix(POS)];
                        grad[ix(VEL)] += bn * 2.0 * w.q_mean[DOF + ax] * s[VEL] * self.state_scale[ix(VEL)];
                        grad[ix(PP)] += bn * w.q_cov[ax] * self.state_scale[ix(PP)];
                        grad[ix(VV)] += bn * w.q_cov[DOF + ax] * self.state_scale[ix(VV)];
                        for aj in 0..na {
                            let pj = self.state_index(n, k, aj, POS);
                            let axj = self.axes[aj];
                            grad[pj] += bn
                                * (2.0 * w.q_force[ax] * e * g.dmean[axj] + w.q_force_var[ax] * g.dvar[axj])
                                * self.state_scale[pj];
                        }
                        if w.force_ref_offset {
                            grad[col_fr(k - 1, ai)] += bn * 2.0 * w.q_force[ax] * e * FORCE_REF_SCALE;
                        }
                    }
                }
                if let Some(wm) = &self.arm_metric {
                    let wf = wm * fh;
                    f += bn * fh.dot(&wf);
                    for ai in 0..na {
                        let ax = self.axes[ai];
                        if ax >= 3 {
                            continue;
                        }
                        let v = st[self.state_index(n, k, ai, VEL)];
                        if derivs {
                            let iv = self.state_index(n, k, ai, VEL);
                            grad[iv] += bn * 2.0 * d[ai] * wf[ax] * self.state_scale[iv];
                        }
                        g_d[ai] += bn * 2.0 * v * wf[ax];
                    }
                }
            }
            gp_final.push(gps[h].clone());
        }

        // mode-independent costs
        for k in 0..h {
            for ai in 0..na {
                let ax = self.axes[ai];
                let fr = inp.force_ref[k][ai];
                f += w.q_input[ax] * fr * fr;
                let mut gfr = 2.0 * w.q_input[ax] * fr;
                if let Some(t) = &cfg.force_ref_target {
                    let e = fr - t.target[ax];
                    f += t.weight[ax] * e * e;
                    gfr += 2.0 * t.weight[ax] * e;
                }
                if derivs {
                    grad[col_fr(k, ai)] += gfr * FORCE_REF_SCALE;
                }
            }
        }
        for ai in 0..na {
            let ax = self.axes[ai];
            let (dm, dd) = (inp.delta_mass[ai], inp.delta_damping[ai]);
            f += cfg.q_delta_mass[ax] * dm * dm + cfg.q_delta_damping[ax] * dd * dd;
            g_m[ai] += 2.0 * cfg.q_delta_mass[ax] * dm;
            g_d[ai] += 2.0 * cfg.q_delta_damping[ax] * dd;
            let em = m[ai] - cfg.limits.mass_min[ax];
            let ed = d[ai] - cfg.limits.damping_min[ax];
            f += cfg.q_mass_level[ax] * em * em + cfg.q_damping_level[ax] * ed * ed;
            g_m[ai] += 2.0 * cfg.q_mass_level[ax] * em;
            g_d[ai] += 2.0 * cfg.q_damping_level[ax] * ed;
            let dist = &cfg.disturbance;
            if dist.enabled && dist.alpha[ax] > 0.0 {
                let (v, gm, gd) = h2_disturbance_cost_grad(m[ai], d[ai], dist.stiffness[ax], dist.alpha[ax], dist.omega)?;
                f += dist.weight * v;
                g_m[ai] += dist.weight * gm;
                g_d[ai] += dist.weight * gd;
            }
        }
        if derivs {
            for ai in 0..na {
                if let Some(col) = col_dm(ai) {
                    grad[col] += g_m[ai] * self.dm_scale[ai];
                }
                if let Some(col) = col_dd(ai) {
                    grad[col] += g_d[ai] * self.dd_scale[ai];
                }
            }
        }

        // inequalities
        let ni = self.ineqs.len();
        let mut g = DVector::zeros(ni);
        let mut jg = DMatrix::zeros(if derivs { ni } else { 0 }, if derivs { nv } else { 0 });
        let zf = &z[ns..];
        for (r, iq) in self.ineqs.iter().enumerate() {
            match *iq {
                Ineq::Lower(j, lo) => {
                    g[r] = zf[j] - lo;
                    if derivs {
                        jg[(r, ns + j)] = 1.0;
                    }
                }
                Ineq::Upper(j, hi) => {
                    g[r] = hi - zf[j];
                    if derivs {
                        jg[(r, ns + j)] = -1.0;
                    }
                }
                Ineq::Chance { mode, ai } => {
                    let gn = &gp_final[mode][ai];
                    let sign = cfg.chance.sign[self.axes[ai]];
                    let sd = (gn.var + VAR_FLOOR).sqrt();
                    let scale = self.chance_scale();
                    g[r] = (cfg.chance.f_bar - self.kappa * sd - sign * gn.mean) / scale;
                    if derivs {
                        for aj in 0..na {
                            let pj = self.state_index(mode, h, aj, POS);
                            let axj = self.axes[aj];
                            jg[(r, pj)] = (-self.kappa * gn.dvar[axj] / (2.0 * sd) - sign * gn.dmean[axj])
                                * self.state_scale[pj]
                                / scale;
                        }
                    }
                }
                Ineq::WellDamped { k, ai } => {
                    let (gn, hrow) = &wd_nodes[k][ai];
                    let ax = self.axes[ai];
                    let zeta = cfg.well_damped.zeta;
                    let slope = gn.dmean[ax];
                    let eta = cfg.well_damped.slope_smoothing;
                    let ke = (slope * slope + eta * eta).sqrt();
                    let root = (m[ai] * ke).sqrt();
                    let scale = self.wd_scale(ai);
                    g[r] = (d[ai] - 2.0 * zeta * root) / scale;
                    if derivs {
                        if let Some(col) = col_dd(ai) {
                            jg[(r, col)] = self.dd_scale[ai] / scale;
                        }
                        if let Some(col) = col_dm(ai) {
                            jg[(r, col)] = -zeta * ke / root * self.dm_scale[ai] / scale;
                        }
                        for aj in 0..na {
                            let pj = self.state_index(self.wd_mode, k, aj, POS);
                            let dke = slope / ke * hrow[self.axes[aj]];
                            jg[(r, pj)] = -zeta * m[ai] / root * dke * self.state_scale[pj] / scale;
                        }
                    }
                }
            }
        }

        Ok(NlpEval { f, grad, c, jac_c: jc, g, jac_g: jg })
    }
}

impl Nlp for MpcProblem<'_> {
    fn n_state(&self) -> usize {
        self.nm * self.h * self.na * NODE_DIM
    }

    fn n_free(&self) -> usize {
        self.n_free
    }

    fn n_ineq(&self) -> usize {
        self.ineqs.len()
    }

    fn eval(&self, x: &[f64]) -> Result<NlpEval> {
        self.evaluate(x, true)
    }

    /// The state block of the continuity Jacobian is unit lower triangular.
    fn solve_state(&self, jac_c: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let ns = self.n_state();
        let js = jac_c.columns(0, ns);
        let mut x = rhs.clone();
        for i in 0..ns {
            for j in 0..i {
                let l = js[(i, j)];
                if l != 0.0 {
                    for col in 0..x.ncols() {
                        let v = x[(j, col)];
                        x[(i, col)] -= l * v;
                    }
                }
            }
        }
        Some(x)
    }

    fn hessian_guess(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        let ns = self.n_state();
        let nv = ns + self.n_free;
        let mut hmat = DMatrix::zeros(nv, nv);
        let w = &self.cfg.weights;
        for n in 0..self.nm {
            for k in 1..=self.h {
                for (ai, &ax) in self.axes.iter().enumerate() {
                    let ip = self.state_index(n, k, ai, POS);
                    let iv = self.state_index(n, k, ai, VEL);
                    hmat[(ip, ip)] += 2.0 * self.belief[n] * w.q_mean[ax] * self.state_scale[ip].powi(2);
                    hmat[(iv, iv)] += 2.0 * self.belief[n] * w.q_mean[DOF + ax] * self.state_scale[iv].powi(2);
                }
            }
        }
        for k in 0..self.h {
            for (ai, &ax) in self.axes.iter().enumerate() {
                let mut q = w.q_input[ax];
                if let Some(t) = &self.cfg.force_ref_target {
                    q += t.weight[ax];
                }
                if w.force_ref_offset {
                    q += w.q_force[ax];
                }
                let j = ns + k * self.na + ai;
                hmat[(j, j)] += 2.0 * q * FORCE_REF_SCALE * FORCE_REF_SCALE;
            }
        }
        for (ai, &ax) in self.axes.iter().enumerate() {
            if let Some(j) = self.mass_idx[ai] {
                let q = self.cfg.q_delta_mass[ax] + self.cfg.q_mass_level[ax];
                hmat[(ns + j, ns + j)] += 2.0 * q * self.dm_scale[ai].powi(2);
            }
            if let Some(j) = self.damp_idx[ai] {
                let q = self.cfg.q_delta_damping[ax] + self.cfg.q_damping_level[ax];
                hmat[(ns + j, ns + j)] += 2.0 * q * self.dd_scale[ai].powi(2);
            }
        }
        Some(hmat)
    }
}
