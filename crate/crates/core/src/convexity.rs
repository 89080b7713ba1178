//! Curvature of single-step covariance objectives with respect to impedance,
//! and the structure of the one-step differential of the Gaussian dynamics.

use std::io::Write;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::admittance::{
    discretize, propagate_cov_raw, propagate_mean, velocity_decay, velocity_decay_grad, ImpedanceParams, Scheme,
    StateMat, StateVec, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::types::{Vec6, Wrench, DOF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Trace,
    Logdet,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::Trace, Objective::Logdet];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Trace => "trace",
            Objective::Logdet => "logdet",
        }
    }
}

/// Grid for the Hessian eigenvalue study on one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub integrators: Vec<Scheme>,
    pub objectives: Vec<Objective>,
    /// Force variance values [N^2].
    pub sigma_f: Vec<f64>,
    /// Mass grid [kg].
    pub mass: Vec<f64>,
    /// Damping grid [Ns/m].
    pub damping: Vec<f64>,
    pub ts: f64,
    /// Weight on `[position, velocity]`, row-major.
    pub weight: [[f64; 2]; 2],
    /// Prior state covariance, row-major.
    pub state_cov: [[f64; 2]; 2],
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            integrators: Scheme::ALL.to_vec(),
            objectives: Objective::ALL.to_vec(),
            sigma_f: log_grid(1e-3, 1e3, 13),
            mass: (0..8).map(|i| 1.0 + 19.0 * i as f64 / 7.0).collect(),
            damping: log_grid(10.0, 2000.0, 8),
            ts: 0.02,
            weight: [[1.0, 0.0], [0.0, 1.0]],
            state_cov: [[1e-6, 0.0], [0.0, 2e-9]],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let grids = [
            ("integrators", self.integrators.len()),
            ("objectives", self.objectives.len()),
            ("sigma_f", self.sigma_f.len()),
            ("mass", self.mass.len()),
            ("damping", self.damping.len()),
        ];
        for (name, len) in grids {
            if len == 0 {
                return Err(Error::Config(format!("sweep grid `{name}` is empty")));
            }
        }
        if self.sigma_f.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma_f values must be finite and non-negative".into()));
        }
        if self.mass.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config("mass values must be positive".into()));
        }
        if self.damping.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Config("damping values must be non-negative".into()));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::Config("ts must be positive".into()));
        }
        let s = mat2(&self.state_cov);
        if (s - s.transpose()).amax() > 0.0 || s.symmetric_eigenvalues().min() < 0.0 {
            return Err(Error::Config("state_cov must be symmetric positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn mat2(a: &[[f64; 2]; 2]) -> Matrix2<f64> {
    Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1])
}

/// One-axis single-step problem data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleStep {
    pub ts: f64,
    pub scheme: Scheme,
    pub objective: Objective,
    pub weight: Matrix2<f64>,
    pub state_cov: Matrix2<f64>,
    pub sigma_f: f64,
}

impl SingleStep {
    pub fn from_spec(spec: &SweepSpec, scheme: Scheme, objective: Objective, sigma_f: f64) -> Self {
        SingleStep {
            ts: spec.ts,
            scheme,
            objective,
            weight: mat2(&spec.weight),
            state_cov: mat2(&spec.state_cov),
            sigma_f,
        }
    }

    fn propagated(&self, mass: f64, damping: f64) -> Matrix2<f64> {
        let a = Matrix2::new(1.0, self.ts, 0.0, velocity_decay(mass, damping, self.ts, self.scheme));
        let b = Vector2::new(0.0, self.ts / mass);
        a * self.state_cov * a.transpose() + b * b.transpose() * self.sigma_f
    }

    /// Objective value at `(mass, damping)`.
    pub fn value(&self, mass: f64, damping: f64) -> Result<f64> {
        let next = self.propagated(mass, damping);
        match self.objective {
            Objective::Trace => Ok((self.weight * next).trace()),
            Objective::Logdet => {
                let det = (self.weight * next).determinant();
                if det > 0.0 && det.is_finite() {
                    Ok(det.ln())
                } else {
                    Err(Error::Degenerate(format!("log det of a singular weighted covariance (det = {det:e})")))
                }
            }
        }
    }

    /// Analytic gradient with respect to `(mass, damping)`.
    pub fn gradient(&self, mass: f64, damping: f64) -> Result<Vector2<f64>> {
        let ts = self.ts;
        let decay = velocity_decay(mass, damping, ts, self.scheme);
        let (da_dm, da_dd) = velocity_decay_grad(mass, damping, ts, self.scheme);
        let a = Matrix2::new(1.0, ts, 0.0, decay);
        let b = Vector2::new(0.0, ts / mass);
        let db_dm = Vector2::new(0.0, -ts / (mass * mass));
        let d_next = |da: f64, db: Vector2<f64>| {
            let d_a = Matrix2::new(0.0, 0.0, 0.0, da);
            let left = d_a * self.state_cov * a.transpose();
            let input = db * b.transpose() * self.sigma_f;
            left + left.transpose() + input + input.transpose()
        };
        let dm = d_next(da_dm, db_dm);
        let dd = d_next(da_dd, Vector2::zeros());
        match self.objective {
            Objective::Trace => Ok(Vector2::new((self.weight * dm).trace(), (self.weight * dd).trace())),
            Objective::Logdet => {
                let next = self.propagated(mass, damping);
                if self.weight.determinant() <= 0.0 {
                    return Err(Error::Degenerate("log det objective needs a positive definite weight".into()));
                }
                let inv = next
                    .try_inverse()
                    .ok_or_else(|| Error::Degenerate("singular propagated covariance".into()))?;
                Ok(Vector2::new((inv * dm).trace(), (inv * dd).trace()))
            }
        }
    }

    /// Hessian in relative coordinates `phi = phi0 * (1 + u)`, by central
    /// differences of the analytic gradient. Congruent to the plain Hessian,
    /// so the signs of its eigenvalues match.
    pub fn relative_hessian(&self, mass: f64, damping: f64) -> Result<Matrix2<f64>> {
        let phi = [mass, damping];
        let mut h = Matrix2::zeros();
        for j in 0..2 {
            let step = 1e-5 * phi[j].abs().max(1e-8);
            let mut up = phi;
            let mut dn = phi;
            up[j] += step;
            dn[j] -= step;
            let col = (self.gradient(up[0], up[1])? - self.gradient(dn[0], dn[1])?) / (2.0 * step);
            for i in 0..2 {
                h[(i, j)] = col[i] * phi[i] * phi[j];
            }
        }
        Ok((h + h.transpose()) * 0.5)
    }
}

/// `Tr(Q S+)` or `ln det(Q S+)` for one axis.
pub fn single_step_objective(
    mass: f64,
    damping: f64,
    state_cov: &Matrix2<f64>,
    sigma_f: f64,
    weight: &Matrix2<f64>,
    ts: f64,
    scheme: Scheme,
    objective: Objective,
) -> Result<f64> {
    ImpedanceParams::new(Vec6::repeat(mass), Vec6::repeat(damping))?;
    SingleStep { ts, scheme, objective, weight: *weight, state_cov: *state_cov, sigma_f }.value(mass, damping)
}

fn min_eig(h: &Matrix2<f64>) -> f64 {
    SymmetricEigen::new(*h).eigenvalues.min()
}

/// Smallest eigenvalue after scaling to unit diagonal magnitude.
fn normalized_min_eig(h: &Matrix2<f64>) -> f64 {
    let s = Vector2::new(h[(0, 0)], h[(1, 1)]).map(|d| if d.abs() > 0.0 { 1.0 / d.abs().sqrt() } else { 1.0 });
    let hs = Matrix2::from_diagonal(&s) * h * Matrix2::from_diagonal(&s);
    min_eig(&hs)
}

/// Worst case over the impedance grid for one `(integrator, objective, sigma_f)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub integrator: Scheme,
    pub objective: Objective,
    pub sigma_f: f64,
    /// Smallest eigenvalue of the relative-coordinate Hessian over the grid.
    pub min_eig: f64,
    /// Smallest eigenvalue after unit-diagonal scaling, comparable across objectives.
    pub min_eig_normalized: f64,
    pub worst_mass: f64,
    pub worst_damping: f64,
    /// Grid points where the objective was undefined.
    pub degenerate: usize,
}

fn sweep_row(spec: &SweepSpec, scheme: Scheme, objective: Objective, sigma_f: f64) -> SweepRow {
    let prob = SingleStep::from_spec(spec, scheme, objective, sigma_f);
    let mut row = SweepRow {
        integrator: scheme,
        objective,
        sigma_f,
        min_eig: f64::INFINITY,
        min_eig_normalized: f64::INFINITY,
        worst_mass: f64::NAN,
        worst_damping: f64::NAN,
        degenerate: 0,
    };
    for &m in &spec.mass {
        for &d in &spec.damping {
            match prob.relative_hessian(m, d) {
                Ok(h) => {
                    let e = min_eig(&h);
                    if e < row.min_eig {
                        row.min_eig = e;
                        row.worst_mass = m;
                        row.worst_damping = d;
                    }
                    row.min_eig_normalized = row.min_eig_normalized.min(normalized_min_eig(&h));
                }
                Err(_) => row.degenerate += 1,
            }
        }
    }
    row
}

/// Minimum Hessian eigenvalue table, ordered by integrator, objective, then
/// increasing `sigma_f`.
pub fn hessian_min_eig(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    hessian_min_eig_threads(spec, 1)
}

/// As [`hessian_min_eig`], spreading grid rows over up to `threads` workers.
pub fn hessian_min_eig_threads(spec: &SweepSpec, threads: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut sigma = spec.sigma_f.clone();
    sigma.sort_by(f64::total_cmp);
    let mut jobs = Vec::new();
    for &scheme in &spec.integrators {
        for &objective in &spec.objectives {
            for &s in &sigma {
                jobs.push((scheme, objective, s));
            }
        }
    }
    let threads = threads.clamp(1, jobs.len());
    if threads == 1 {
        return Ok(jobs.iter().map(|&(sc, ob, s)| sweep_row(spec, sc, ob, s)).collect());
    }
    let chunk = jobs.len().div_ceil(threads);
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&(sc, ob, s)| sweep_row(spec, sc, ob, s)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["integrator", "objective", "sigma_f", "min_eig", "min_eig_normalized", "worst_mass", "worst_damping", "degenerate"])?;
    for r in rows {
        w.write_record([
            r.integrator.name().to_string(),
            r.objective.name().to_string(),
            format!("{:e}", r.sigma_f),
            format!("{:e}", r.min_eig),
            format!("{:e}", r.min_eig_normalized),
            r.worst_mass.to_string(),
            r.worst_damping.to_string(),
            r.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One-step sensitivities of the propagated mean and covariance.
///
/// Columns are indexed by axis; covariance derivatives are column-major
/// `vec` of the 12x12 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialReport {
    pub mean_wrt_force_ref: DMatrix<f64>,
    pub mean_wrt_mass: DMatrix<f64>,
    pub mean_wrt_damping: DMatrix<f64>,
    pub cov_wrt_force_ref: DMatrix<f64>,
    pub cov_wrt_mass: DMatrix<f64>,
    pub cov_wrt_damping: DMatrix<f64>,
}

impl DifferentialReport {
    /// The force reference never enters the covariance update.
    pub fn cov_independent_of_force_ref(&self) -> bool {
        self.cov_wrt_force_ref.iter().all(|v| *v == 0.0)
    }

    pub fn mean_depends_on_force_ref(&self) -> bool {
        self.mean_wrt_force_ref.iter().any(|v| *v != 0.0)
    }

    pub fn mean_depends_on_impedance(&self) -> bool {
        self.mean_wrt_mass.iter().chain(self.mean_wrt_damping.iter()).any(|v| *v != 0.0)
    }
}

/// Analytic derivatives of `(mean+, cov+)` with respect to force reference,
/// mass and damping for one step of the diagonal admittance.
pub fn impedance_vs_trajectory_differential(
    phi: &ImpedanceParams,
    mean: &StateVec,
    cov: &StateMat,
    f_mean: &Wrench,
    f_var: &Vec6,
    f_ref: &Wrench,
    ts: f64,
    scheme: Scheme,
) -> Result<DifferentialReport> {
    let dy = discretize(phi, ts, scheme)?;
    let n2 = STATE_DIM * STATE_DIM;
    let mut rep = DifferentialReport {
        mean_wrt_force_ref: DMatrix::zeros(STATE_DIM, DOF),
        mean_wrt_mass: DMatrix::zeros(STATE_DIM, DOF),
        mean_wrt_damping: DMatrix::zeros(STATE_DIM, DOF),
        cov_wrt_force_ref: DMatrix::zeros(n2, DOF),
        cov_wrt_mass: DMatrix::zeros(n2, DOF),
        cov_wrt_damping: DMatrix::zeros(n2, DOF),
    };
    let sf = nalgebra::Matrix6::from_diagonal(f_var);
    for i in 0..DOF {
        let (m, d) = (phi.mass[i], phi.damping[i]);
        let (da_dm, da_dd) = velocity_decay_grad(m, d, ts, scheme);
        let vi = DOF + i;
        let drive = f_mean[i] - f_ref[i];

        rep.mean_wrt_force_ref[(vi, i)] = -dy.b[(vi, i)];
        rep.mean_wrt_mass[(vi, i)] = da_dm * mean[vi] - ts / (m * m) * drive;
        rep.mean_wrt_damping[(vi, i)] = da_dd * mean[vi];

        let mut d_a = StateMat::zeros();
        d_a[(vi, vi)] = da_dm;
        let mut d_b = crate::admittance::InputMat::zeros();
        d_b[(vi, i)] = -ts / (m * m);
        let left = d_a * cov * dy.a.transpose();
        let input = d_b * sf * dy.b.transpose();
        let dm = left + left.transpose() + input + input.transpose();
        rep.cov_wrt_mass.set_column(i, &DMatrix::from_column_slice(n2, 1, dm.as_slice()).column(0));

        d_a[(vi, vi)] = da_dd;
        let left = d_a * cov * dy.a.transpose();
        let dd = left + left.transpose();
        rep.cov_wrt_damping.set_column(i, &DMatrix::from_column_slice(n2, 1, dd.as_slice()).column(0));
    }
    Ok(rep)
}

/// Propagated `(mean, cov)` used as the reference for the differential report.
pub fn one_step(
    phi: &ImpedanceParams,
    mean: &StateVec,
    cov: &StateMat,
    f_mean: &Wrench,
    f_var: &Vec6,
    f_ref: &Wrench,
    ts: f64,
    scheme: Scheme,
) -> Result<(StateVec, StateMat)> {
    let dy = discretize(phi, ts, scheme)?;
    Ok((propagate_mean(&dy, mean, f_mean, f_ref), propagate_cov_raw(&dy, cov, f_var)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_step(rng: &mut ChaCha8Rng, objective: Objective) -> (SingleStep, f64, f64) {
        let l = Matrix2::new(rng.random_range(0.5..2.0), 0.0, rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0));
        let c = Matrix2::new(rng.random_range(1e-3..1e-2), 0.0, rng.random_range(-1e-3..1e-3), rng.random_range(1e-3..1e-2));
        let scheme = Scheme::ALL[rng.random_range(0..3)];
        let p = SingleStep {
            ts: rng.random_range(0.002..0.02),
            scheme,
            objective,
            weight: l * l.transpose(),
            state_cov: c * c.transpose(),
            sigma_f: rng.random_range(0.01..100.0),
        };
        (p, rng.random_range(1.0..20.0), rng.random_range(10.0..400.0))
    }

    #[test]
    fn zero_weight_trace_is_zero() {
        let v = single_step_objective(5.0, 100.0, &Matrix2::identity(), 2.0, &Matrix2::zeros(), 0.01, Scheme::Implicit, Objective::Trace).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn scalar_axis_from_rest() {
        for scheme in Scheme::ALL {
            let (m, ts, sf, q) = (4.0, 0.01, 3.0, 2.5);
            let w = Matrix2::new(0.0, 0.0, 0.0, q);
            let v = single_step_objective(m, 50.0, &Matrix2::zeros(), sf, &w, ts, scheme, Objective::Trace).unwrap();
            let expected = q * (ts / m).powi(2) * sf;
            assert!((v - expected).abs() < 1e-15 * expected.max(1.0), "{v} vs {expected}");
        }
    }

    #[test]
    fn trace_matches_kronecker_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (p, m, d) = random_step(&mut rng, Objective::Trace);
            let a = DMatrix::from_row_slice(2, 2, &[1.0, p.ts, 0.0, velocity_decay(m, d, p.ts, p.scheme)]);
            let b = DMatrix::from_row_slice(2, 1, &[0.0, p.ts / m]);
            let sigma = DMatrix::from_column_slice(4, 1, p.state_cov.as_slice());
            let q = DMatrix::from_column_slice(4, 1, p.weight.as_slice());
            let at = a.transpose();
            let bt = b.transpose();
            let vectorized = (sigma.transpose() * at.kronecker(&at) + bt.kronecker(&bt) * p.sigma_f) * q;
            let direct = p.value(m, d).unwrap();
            assert!((vectorized[(0, 0)] - direct).abs() < 1e-12 * direct.abs().max(1e-12));
        }
    }

    #[test]
    fn logdet_of_singular_covariance_is_degenerate() {
        let r = single_step_objective(5.0, 100.0, &Matrix2::zeros(), 1.0, &Matrix2::identity(), 0.01, Scheme::Implicit, Objective::Logdet);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for objective in Objective::ALL {
            for _ in 0..100 {
                let (p, m, d) = random_step(&mut rng, objective);
                let g = p.gradient(m, d).unwrap();
                let (hm, hd) = (1e-6 * m, 1e-6 * d);
                let fd_m = (p.value(m + hm, d).unwrap() - p.value(m - hm, d).unwrap()) / (2.0 * hm);
                let fd_d = (p.value(m, d + hd).unwrap() - p.value(m, d - hd).unwrap()) / (2.0 * hd);
                let scale = g.amax().max(1e-12);
                assert!((g[0] - fd_m).abs() < 1e-4 * scale, "{objective:?} dM {} vs {fd_m}", g[0]);
                assert!((g[1] - fd_d).abs() < 1e-4 * scale, "{objective:?} dD {} vs {fd_d}", g[1]);
            }
        }
    }

    #[test]
    fn hessian_agrees_with_second_order_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for objective in Objective::ALL {
            for _ in 0..50 {
                let (p, m, d) = random_step(&mut rng, objective);
                let h = p.relative_hessian(m, d).unwrap();
                let f = |u: f64, v: f64| p.value(m * (1.0 + u), d * (1.0 + v)).unwrap();
                let e = 1e-3;
                let full = Matrix2::new(
                    (f(e, 0.0) - 2.0 * f(0.0, 0.0) + f(-e, 0.0)) / (e * e),
                    (f(e, e) - f(e, -e) - f(-e, e) + f(-e, -e)) / (4.0 * e * e),
                    (f(e, e) - f(e, -e) - f(-e, e) + f(-e, -e)) / (4.0 * e * e),
                    (f(0.0, e) - 2.0 * f(0.0, 0.0) + f(0.0, -e)) / (e * e),
                );
                let scale = h.amax();
                assert!((h - full).amax() < 1e-3 * scale, "{objective:?}\n{h}\n{full}");
            }
        }
    }

    #[test]
    fn relative_and_plain_hessians_share_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (p, m, d) = random_step(&mut rng, Objective::Trace);
            let rel = p.relative_hessian(m, d).unwrap();
            let s = Matrix2::from_diagonal(&Vector2::new(1.0 / m, 1.0 / d));
            let plain = s * rel * s;
            let e1 = SymmetricEigen::new(rel).eigenvalues;
            let e2 = SymmetricEigen::new(plain).eigenvalues;
            let neg = |e: &Vector2<f64>, sc: f64| e.iter().filter(|v| **v < -1e-9 * sc).count();
            assert_eq!(neg(&e1, rel.amax()), neg(&e2, plain.amax()));
        }
    }

    #[test]
    fn default_sweep_shape() {
        let spec = SweepSpec::default();
        let rows = hessian_min_eig_threads(&spec, 4).unwrap();
        assert_eq!(rows.len(), 3 * 2 * spec.sigma_f.len());
        assert_eq!(rows, hessian_min_eig(&spec).unwrap());
        for w in rows.windows(2) {
            if w[0].integrator == w[1].integrator && w[0].objective == w[1].objective {
                assert!(w[0].sigma_f < w[1].sigma_f);
            }
        }
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), rows.len() + 1);
    }

    #[test]
    fn default_sweep_ordering() {
        let rows = hessian_min_eig(&SweepSpec::default()).unwrap();
        let pick = |sc: Scheme, ob: Objective| rows.iter().filter(|r| r.integrator == sc && r.objective == ob).collect::<Vec<_>>();
        let imp_tr = pick(Scheme::Implicit, Objective::Trace);
        let eul_tr = pick(Scheme::Euler, Objective::Trace);
        let imp_ld = pick(Scheme::Implicit, Objective::Logdet);
        assert!(imp_tr.iter().all(|r| r.min_eig >= 0.0));
        assert!(eul_tr.iter().any(|r| r.min_eig < 0.0));
        assert!(imp_tr.windows(2).all(|w| w[1].min_eig >= w[0].min_eig));
        for i in 0..imp_tr.len() {
            assert!(imp_tr[i].min_eig_normalized >= eul_tr[i].min_eig_normalized);
            assert!(imp_tr[i].min_eig_normalized >= imp_ld[i].min_eig_normalized);
        }
    }

    #[test]
    fn spec_parsing_is_strict() {
        assert!(SweepSpec::from_toml("ts = 0.01\nbogus = 1\n").is_err());
        assert!(SweepSpec::from_toml("sigma_f = []\n").is_err());
        let s = SweepSpec::from_toml("integrators = [\"implicit\"]\nobjectives = [\"trace\"]\n").unwrap();
        assert_eq!(s.integrators, vec![Scheme::Implicit]);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (ImpedanceParams, StateVec, StateMat, Wrench, Vec6, Wrench, f64, Scheme) {
        let phi = ImpedanceParams::new(
            Vec6::from_fn(|_, _| rng.random_range(1.0..20.0)),
            Vec6::from_fn(|_, _| rng.random_range(10.0..500.0)),
        )
        .unwrap();
        let mean = StateVec::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let l = StateMat::from_fn(|i, j| if i >= j { rng.random_range(-0.1..0.1) } else { 0.0 });
        let cov = l * l.transpose();
        let f_mean = Wrench(Vec6::from_fn(|_, _| rng.random_range(-20.0..20.0)));
        let f_var = Vec6::from_fn(|_, _| rng.random_range(0.0..10.0));
        let f_ref = Wrench(Vec6::from_fn(|_, _| rng.random_range(-20.0..20.0)));
        (phi, mean, cov, f_mean, f_var, f_ref, rng.random_range(0.002..0.02), Scheme::ALL[rng.random_range(0..3)])
    }

    #[test]
    fn differential_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (phi, mean, cov, fm, fv, fr, ts, scheme) = random_instance(&mut rng);
            let rep = impedance_vs_trajectory_differential(&phi, &mean, &cov, &fm, &fv, &fr, ts, scheme).unwrap();
            assert!(rep.cov_independent_of_force_ref());
            assert!(rep.mean_depends_on_force_ref() && rep.mean_depends_on_impedance());
            let step = |phi: &ImpedanceParams, fr: &Wrench| one_step(phi, &mean, &cov, &fm, &fv, fr, ts, scheme).unwrap();
            for i in 0..DOF {
                let checks: [(&DMatrix<f64>, &DMatrix<f64>, Box<dyn Fn(f64) -> (StateVec, StateMat)>, f64); 3] = [
                    (&rep.mean_wrt_mass, &rep.cov_wrt_mass, Box::new(|h| {
                        let mut p = phi;
                        p.mass[i] += h;
                        step(&p, &fr)
                    }), 1e-5 * phi.mass[i]),
                    (&rep.mean_wrt_damping, &rep.cov_wrt_damping, Box::new(|h| {
                        let mut p = phi;
                        p.damping[i] += h;
                        step(&p, &fr)
                    }), 1e-5 * phi.damping[i]),
                    (&rep.mean_wrt_force_ref, &rep.cov_wrt_force_ref, Box::new(|h| {
                        let mut r = fr;
                        r.0[i] += h;
                        step(&phi, &r)
                    }), 1e-3),
                ];
                for (dmean, dcov, f, h) in checks {
                    let (mp, cp) = f(h);
                    let (mn, cn) = f(-h);
                    let fd_mean = (mp - mn) / (2.0 * h);
                    let fd_cov = (cp - cn) / (2.0 * h);
                    let sm = dmean.column(i).amax().max(1e-12);
                    let sc = dcov.column(i).amax().max(1e-12);
                    for r in 0..STATE_DIM {
                        assert!((dmean[(r, i)] - fd_mean[r]).abs() < 1e-4 * sm);
                    }
                    for (r, v) in fd_cov.iter().enumerate() {
                        assert!((dcov[(r, i)] - v).abs() < 1e-4 * sc);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_is_stationary_in_impedance_at_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (phi, mut mean, cov, fm, fv, _, ts, scheme) = random_instance(&mut rng);
        for i in DOF..STATE_DIM {
            mean[i] = 0.0;
        }
        let rep = impedance_vs_trajectory_differential(&phi, &mean, &cov, &fm, &fv, &fm, ts, scheme).unwrap();
        assert!(!rep.mean_depends_on_impedance());
        assert!(rep.cov_independent_of_force_ref());
    }

    proptest! {
        #[test]
        fn force_ref_never_enters_covariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (phi, mean, cov, fm, fv, fr, ts, scheme) = random_instance(&mut rng);
            let rep = impedance_vs_trajectory_differential(&phi, &mean, &cov, &fm, &fv, &fr, ts, scheme).unwrap();
            prop_assert!(rep.cov_independent_of_force_ref());
            let (_, c1) = one_step(&phi, &mean, &cov, &fm, &fv, &fr, ts, scheme).unwrap();
            let (_, c2) = one_step(&phi, &mean, &cov, &fm, &fv, &Wrench(fr.0 * 3.0), ts, scheme).unwrap();
            prop_assert_eq!(c1, c2);
        }

        #[test]
        fn min_eig_nondecreasing_in_force_variance(m in 1.0f64..20.0, d in 10.0f64..2000.0, s in 1e-3f64..1e2) {
            let spec = SweepSpec::default();
            let lo = SingleStep::from_spec(&spec, Scheme::Implicit, Objective::Trace, s);
            let hi = SingleStep::from_spec(&spec, Scheme::Implicit, Objective::Trace, s * 10.0);
            let hl = lo.relative_hessian(m, d).unwrap();
            let hh = hi.relative_hessian(m, d).unwrap();
            // symmetric eigensolver accuracy is relative to the matrix norm
            let tol = 1e-6 * min_eig(&hl).abs() + 1e-14 * hh.amax();
            prop_assert!(min_eig(&hh) >= min_eig(&hl) - tol);
        }
    }
}
