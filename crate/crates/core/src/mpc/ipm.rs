//! Reduced-space primal-dual interior-point method for problems of the form
//!
//! ```text
//! min f(s, u)  s.t.  c(s, u) = 0,  g(s, u) >= 0
//! ```
//!
//! where the equality Jacobian with respect to the state block `s` is square
//! and nonsingular. States are eliminated through the linearized equalities so
//! the Newton system lives in the space of free variables `u`. Inequalities
//! get slacks `g - w = 0, w > 0`, steps are globalized with a filter line
//! search, and the reduced Hessian is a damped BFGS approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values and first derivatives at one point. Variables are ordered states first.
#[derive(Clone, Debug)]
pub struct NlpEval {
    pub f: f64,
    pub grad: DVector<f64>,
    pub c: DVector<f64>,
    pub jac_c: DMatrix<f64>,
    pub g: DVector<f64>,
    pub jac_g: DMatrix<f64>,
}

impl NlpEval {
    fn is_finite(&self) -> bool {
        self.f.is_finite()
            && self.grad.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.jac_c.iter().all(|v| v.is_finite())
            && self.jac_g.iter().all(|v| v.is_finite())
    }
}

pub trait Nlp {
    /// Number of state variables, equal to the number of equality constraints.
    fn n_state(&self) -> usize;
    fn n_free(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Result<NlpEval>;

    /// Solve `J_s X = rhs` with `J_s` the leading `n_state` columns of `jac_c`.
    fn solve_state(&self, jac_c: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let ns = self.n_state();
        jac_c.columns(0, ns).into_owned().lu().solve(rhs)
    }

    /// Optional Hessian approximation of the objective over all variables,
    /// used to seed the reduced quasi-Newton matrix.
    fn hessian_guess(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpmOptions {
    pub max_iter: usize,
    pub dual_tol: f64,
    pub primal_tol: f64,
    pub mu_init: f64,
    pub verbose: bool,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions { max_iter: 100, dual_tol: 1e-4, primal_tol: 1e-6, mu_init: 0.1, verbose: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl SolveStatus {
    pub fn name(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterLog {
    pub iteration: usize,
    pub objective: f64,
    pub primal_inf: f64,
    pub dual_inf: f64,
    pub mu: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct IpmResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Inequality multipliers.
    pub lambda: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Largest equality residual or inequality violation at `x`.
    pub primal_inf: f64,
    pub dual_inf: f64,
    pub log: Vec<IterLog>,
}

struct Reduced {
    /// `[-J_s^-1 J_u; I]`
    z: DMatrix<f64>,
    /// `[-J_s^-1 c; 0]`
    yp: DVector<f64>,
}

fn reduce<P: Nlp + ?Sized>(nlp: &P, ev: &NlpEval) -> Result<Reduced> {
    let (ns, nu) = (nlp.n_state(), nlp.n_free());
    let n = ns + nu;
    let mut rhs = DMatrix::<f64>::zeros(ns, nu + 1);
    rhs.columns_mut(0, nu).copy_from(&ev.jac_c.columns(ns, nu));
    rhs.column_mut(nu).copy_from(&ev.c);
    let sol = if ns == 0 {
        DMatrix::zeros(0, nu + 1)
    } else {
        nlp.solve_state(&ev.jac_c, &rhs).ok_or_else(|| Error::Degenerate("state Jacobian is singular".into()))?
    };
    let mut z = DMatrix::<f64>::zeros(n, nu);
    z.rows_mut(0, ns).copy_from(&(-sol.columns(0, nu)));
    z.rows_mut(ns, nu).fill_with_identity();
    let mut yp = DVector::<f64>::zeros(n);
    yp.rows_mut(0, ns).copy_from(&(-sol.column(nu)));
    Ok(Reduced { z, yp })
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn constraint_violation(ev: &NlpEval) -> f64 {
    let c = inf_norm(&ev.c);
    let g = ev.g.iter().fold(0.0f64, |a, b| a.max(-b));
    c.max(g)
}

/// Primal infeasibility of the slack formulation (1-norm).
fn theta(ev: &NlpEval, w: &DVector<f64>) -> f64 {
    ev.c.iter().map(|v| v.abs()).sum::<f64>() + (&ev.g - w).iter().map(|v| v.abs()).sum::<f64>()
}

fn barrier(f: f64, w: &DVector<f64>, mu: f64) -> f64 {
    f - mu * w.iter().map(|v| v.ln()).sum::<f64>()
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>, tau: f64) -> f64 {
    let mut a = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            a = a.min(-tau * v[i] / dv[i]);
        }
    }
    a
}

/// Symmetric positive-definite projection by eigenvalue clipping.
fn make_pd(b: &DMatrix<f64>, floor_rel: f64) -> DMatrix<f64> {
    let sym = (b + b.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if top < 1e-12 {
        return DMatrix::identity(b.nrows(), b.ncols());
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor_rel * top));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn solve_spd(mut k: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = k.nrows();
    let scale = (0..n).map(|i| k[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut ridge = 0.0;
    loop {
        if let Some(ch) = k.clone().cholesky() {
            return ch.solve(rhs);
        }
        let add = if ridge == 0.0 { 1e-10 * scale } else { ridge * 9.0 };
        for i in 0..n {
            k[(i, i)] += add;
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
    }
}

struct Filter {
    entries: Vec<(f64, f64)>,
}

impl Filter {
    fn acceptable(&self, th: f64, ph: f64) -> bool {
        self.entries.iter().all(|(t, p)| th < *t || ph < *p)
    }
}

const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const ETA_PHI: f64 = 1e-4;
const KAPPA_EPS: f64 = 10.0;

/// Solve `nlp` from `x0`.
pub fn solve_nlp<P: Nlp + ?Sized>(nlp: &P, x0: &[f64], opts: &IpmOptions) -> Result<IpmResult> {
    let (ns, nu, ni) = (nlp.n_state(), nlp.n_free(), nlp.n_ineq());
    let n = ns + nu;
    if x0.len() != n {
        return Err(Error::Dimension(format!("initial point has {} entries, expected {n}", x0.len())));
    }
    let mut x = DVector::from_column_slice(x0);
    let mut ev = nlp.eval(x.as_slice())?;
    if !ev.is_finite() {
        return Err(Error::Degenerate("objective or constraints not finite at the initial point".into()));
    }
    let f_scale = (100.0 / inf_norm(&ev.grad).max(1e-300)).min(1.0);

    let mut mu = opts.mu_init;
    let mut w = DVector::from_fn(ni, |i, _| ev.g[i].max(1e-2 * ev.g[i].abs().max(1.0)));
    let mut lam = DVector::from_fn(ni, |i, _| mu / w[i]);
    let mut red = reduce(nlp, &ev)?;
    let mut bmat = match nlp.hessian_guess(x.as_slice()) {
        Some(h) => make_pd(&(red.z.transpose() * (h * f_scale) * &red.z), 1e-6),
        None => DMatrix::identity(nu, nu),
    };

    let th0 = theta(&ev, &w);
    let theta_max = 1e4 * th0.max(1.0);
    let theta_min = 1e-4 * th0.max(1.0);
    let mut filter = Filter { entries: vec![(theta_max, f64::INFINITY)] };
    let mut log = Vec::new();
    let mut status = None;
    let mut iterations = 0;
    let mut dual_inf = f64::INFINITY;
    let mut fail_streak = 0;

    while iterations < opts.max_iter {
        let grad = &ev.grad * f_scale;
        let gz = red.z.tr_mul(&grad);
        let gmat = &ev.jac_g * &red.z;
        let dual = &gz - gmat.tr_mul(&lam);
        dual_inf = inf_norm(&dual);
        let primal_slack = inf_norm(&ev.c).max(inf_norm(&(&ev.g - &w)));
        let compl = (0..ni).map(|i| w[i] * lam[i]).fold(0.0, f64::max);

        if dual_inf <= opts.dual_tol && primal_slack <= opts.primal_tol && compl <= opts.dual_tol {
            status = Some(SolveStatus::Converged);
            break;
        }
        // barrier subproblem solved: tighten
        loop {
            let compl_mu = (0..ni).map(|i| (w[i] * lam[i] - mu).abs()).fold(0.0, f64::max);
            let err = dual_inf.max(primal_slack).max(compl_mu);
            let mu_floor = opts.dual_tol.min(opts.primal_tol) / 10.0;
            if err <= KAPPA_EPS * mu && mu > mu_floor {
                mu = (0.2 * mu).min(mu.powf(1.5)).max(mu_floor);
                filter.entries = vec![(theta_max, f64::INFINITY)];
            } else {
                break;
            }
        }
        iterations += 1;

        let sigma = DVector::from_fn(ni, |i, _| lam[i] / w[i]);
        let r = &ev.g - &w + &ev.jac_g * &red.yp;
        let mut kmat = bmat.clone();
        let mut rhs = -&gz;
        if ni > 0 {
            let sg = DMatrix::from_fn(ni, nu, |i, j| sigma[i] * gmat[(i, j)]);
            kmat += gmat.tr_mul(&sg);
            let v = DVector::from_fn(ni, |i, _| mu / w[i] - sigma[i] * r[i]);
            rhs += gmat.tr_mul(&v);
        }
        let du = solve_spd(kmat, &rhs);
        let dx = &red.yp + &red.z * &du;
        let dw = &r + &gmat * &du;
        let dlam = DVector::from_fn(ni, |i, _| mu / w[i] - sigma[i] * dw[i] - lam[i]);

        let tau = (1.0 - mu).max(0.99);
        let alpha_max = max_step(&w, &dw, tau);
        let alpha_lam = max_step(&lam, &dlam, tau);

        let th = theta(&ev, &w);
        let ph = barrier(f_scale * ev.f, &w, mu);
        let dphi = grad.dot(&dx) - mu * (0..ni).map(|i| dw[i] / w[i]).sum::<f64>();

        let mut alpha = alpha_max;
        let alpha_min = 1e-10;
        let mut accepted = None;
        while alpha >= alpha_min {
            let xt = &x + &dx * alpha;
            let wt = &w + &dw * alpha;
            if let Ok(evt) = nlp.eval(xt.as_slice()) {
                if evt.is_finite() {
                    let tht = theta(&evt, &wt);
                    let pht = barrier(f_scale * evt.f, &wt, mu);
                    if tht <= theta_max && filter.acceptable(tht, pht) {
                        let f_type = th <= theta_min && dphi < 0.0 && alpha * (-dphi).powf(2.3) > th.powf(1.1);
                        let ok = if f_type {
                            pht <= ph + ETA_PHI * alpha * dphi
                        } else {
                            tht <= (1.0 - GAMMA_THETA) * th || pht <= ph - GAMMA_PHI * th
                        };
                        if ok {
                            if !f_type {
                                filter.entries.push(((1.0 - GAMMA_THETA) * th, ph - GAMMA_PHI * th));
                            }
                            accepted = Some((xt, wt, evt));
                            break;
                        }
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some((xt, wt, evt)) = accepted else {
            // restoration: take the pure feasibility step on the states and reset slacks
            fail_streak += 1;
            if fail_streak > 3 {
                break;
            }
            let xt = &x + &red.yp;
            match nlp.eval(xt.as_slice()) {
                Ok(evt) if evt.is_finite() => {
                    x = xt;
                    ev = evt;
                }
                _ => {}
            }
            for i in 0..ni {
                w[i] = ev.g[i].max(mu);
                lam[i] = (mu / w[i]).max(lam[i].min(1e6));
            }
            red = reduce(nlp, &ev)?;
            bmat = DMatrix::identity(nu, nu) * bmat.diagonal().mean().max(1e-8);
            filter.entries = vec![(theta_max, f64::INFINITY)];
            if opts.verbose {
                log::debug!("ipm iter {iterations}: line search failed, restoration step");
            }
            continue;
        };
        fail_streak = 0;

        let lam_new = DVector::from_fn(ni, |i, _| {
            let l = lam[i] + alpha_lam * dlam[i];
            let lo = mu / (1e10 * wt[i]);
            let hi = 1e10 * mu / wt[i];
            l.clamp(lo, hi)
        });
        let red_new = reduce(nlp, &evt)?;
        // reduced Lagrangian gradients with the new multipliers
        let gl_new = red_new.z.tr_mul(&(&evt.grad * f_scale - evt.jac_g.tr_mul(&lam_new)));
        let gl_old = red.z.tr_mul(&(&ev.grad * f_scale - ev.jac_g.tr_mul(&lam_new)));
        let s = &du * alpha;
        let y = gl_new - gl_old;
        damped_bfgs(&mut bmat, &s, &y);

        x = xt;
        w = wt;
        lam = lam_new;
        ev = evt;
        red = red_new;

        let entry = IterLog {
            iteration: iterations,
            objective: ev.f,
            primal_inf: constraint_violation(&ev),
            dual_inf,
            mu,
            step: alpha,
        };
        if opts.verbose {
            log::debug!(
                "ipm iter {:3} obj {:.6e} primal {:.2e} dual {:.2e} mu {:.1e} step {:.2e}",
                entry.iteration,
                entry.objective,
                entry.primal_inf,
                entry.dual_inf,
                entry.mu,
                entry.step
            );
        }
        log.push(entry);
    }

    let primal_inf = constraint_violation(&ev);
    let status = status.unwrap_or(if primal_inf > opts.primal_tol.sqrt() { SolveStatus::Infeasible } else { SolveStatus::MaxIter });
    Ok(IpmResult {
        x: x.as_slice().to_vec(),
        f: ev.f,
        lambda: lam.as_slice().to_vec(),
        status,
        iterations,
        primal_inf,
        dual_inf,
        log,
    })
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 || !sbs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-300 || !sr.is_finite() {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min 0.5 u^T H u + q^T u  s.t.  A u >= b`, no states.
    struct Qp {
        h: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Nlp for Qp {
        fn n_state(&self) -> usize {
            0
        }
        fn n_free(&self) -> usize {
            self.q.len()
        }
        fn n_ineq(&self) -> usize {
            self.b.len()
        }
        fn eval(&self, x: &[f64]) -> Result<NlpEval> {
            let u = DVector::from_column_slice(x);
            let n = u.len();
            Ok(NlpEval {
                f: 0.5 * u.dot(&(&self.h * &u)) + self.q.dot(&u),
                grad: &self.h * &u + &self.q,
                c: DVector::zeros(0),
                jac_c: DMatrix::zeros(0, n),
                g: &self.a * &u - &self.b,
                jac_g: self.a.clone(),
            })
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let qp = Qp {
            h: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            q: DVector::from_vec(vec![1.0, 2.0]),
            a: DMatrix::zeros(0, 2),
            b: DVector::zeros(0),
        };
        let opts = IpmOptions { dual_tol: 1e-10, ..Default::default() };
        let r = solve_nlp(&qp, &[3.0, -2.0], &opts).unwrap();
        let exact = qp.h.clone().lu().solve(&(-&qp.q)).unwrap();
        assert_eq!(r.status, SolveStatus::Converged);
        assert!((DVector::from_vec(r.x.clone()) - exact).amax() < 1e-8, "{r:?}");
    }

    #[test]
    fn active_inequality() {
        // min (u0 - 2)^2 + (u1 - 1)^2  s.t.  u0 + u1 <= 2  ->  (1.5, 0.5)
        let qp = Qp {
            h: DMatrix::identity(2, 2) * 2.0,
            q: DVector::from_vec(vec![-4.0, -2.0]),
            a: DMatrix::from_row_slice(3, 2, &[-1.0, -1.0, 1.0, 0.0, 0.0, 1.0]),
            b: DVector::from_vec(vec![-2.0, -10.0, -10.0]),
        };
        let r = solve_nlp(&qp, &[0.0, 0.0], &IpmOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged, "{r:?}");
        assert!((r.x[0] - 1.5).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6, "{:?}", r.x);
        assert!((r.lambda[0] - 1.0).abs() < 1e-4);
    }

    /// States defined by a nonlinear chain `s_k = s_{k-1} + 0.1 sin(u_k)`.
    struct Chain {
        n: usize,
    }

    impl Nlp for Chain {
        fn n_state(&self) -> usize {
            self.n
        }
        fn n_free(&self) -> usize {
            self.n
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64]) -> Result<NlpEval> {
            let n = self.n;
            let (s, u) = x.split_at(n);
            let mut c = DVector::zeros(n);
            let mut jc = DMatrix::zeros(n, 2 * n);
            for k in 0..n {
                let prev = if k == 0 { 0.0 } else { s[k - 1] };
                c[k] = s[k] - prev - 0.1 * u[k].sin();
                jc[(k, k)] = 1.0;
                if k > 0 {
                    jc[(k, k - 1)] = -1.0;
                }
                jc[(k, n + k)] = -0.1 * u[k].cos();
            }
            let target = 0.25;
            let mut grad = DVector::zeros(2 * n);
            grad[n - 1] = 2.0 * (s[n - 1] - target);
            let mut f = (s[n - 1] - target).powi(2);
            for k in 0..n {
                f += 1e-3 * u[k] * u[k];
                grad[n + k] = 2e-3 * u[k];
            }
            // the final state may not exceed 0.2
            let mut jg = DMatrix::zeros(1, 2 * n);
            jg[(0, n - 1)] = -1.0;
            Ok(NlpEval { f, grad, c, jac_c: jc, g: DVector::from_element(1, 0.2 - s[n - 1]), jac_g: jg })
        }
    }

    #[test]
    fn nonlinear_chain_with_bound() {
        let p = Chain { n: 5 };
        let r = solve_nlp(&p, &[0.0; 10], &IpmOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Converged, "{r:?}");
        assert!((r.x[4] - 0.2).abs() < 1e-5, "{:?}", r.x);
        // symmetric optimum spreads the input evenly
        let u = &r.x[5..];
        assert!(u.iter().all(|v| (v - u[0]).abs() < 1e-3));
    }
}
