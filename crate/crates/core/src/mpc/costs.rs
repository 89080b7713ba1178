//! Cost terms and constraint residuals used by the planner.

use nalgebra::{DMatrix, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::admittance::{StateMat, StateVec, STATE_DIM};
use crate::error::{Error, Result};
use crate::human_arm::{jacobian, ArmConfig, ArmGeometry};
use crate::types::{Vec6, Wrench, DOF};

/// Diagonal weights of the per-stage cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// State mean, `[pose; velocity]`.
    pub q_mean: [f64; STATE_DIM],
    /// Diagonal of the state covariance.
    pub q_cov: [f64; STATE_DIM],
    pub q_force: [f64; DOF],
    pub q_force_var: [f64; DOF],
    pub q_tau: [f64; 4],
    /// Force reference.
    pub q_input: [f64; DOF],
    /// Penalize `(f_mean + f_ref)` instead of `f_mean`.
    pub force_ref_offset: bool,
}

impl Default for CostWeights {
    fn default() -> Self {
        let mut q_mean = [0.0; STATE_DIM];
        for q in q_mean.iter_mut().skip(DOF) {
            *q = 1.0;
        }
        CostWeights {
            q_mean,
            q_cov: [0.0; STATE_DIM],
            q_force: [0.0; DOF],
            q_force_var: [0.0; DOF],
            q_tau: [0.0; 4],
            q_input: [1e-4; DOF],
            force_ref_offset: false,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .q_mean
            .iter()
            .chain(&self.q_cov)
            .chain(&self.q_force)
            .chain(&self.q_force_var)
            .chain(&self.q_tau)
            .chain(&self.q_input);
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("cost weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Quadratic stage cost on mean, covariance, force statistics, human joint
/// torque, and force reference.
pub fn stage_cost(
    mean: &StateVec,
    cov: &StateMat,
    f_mean: &Wrench,
    f_var: &Vec6,
    tau: &Vector4<f64>,
    f_ref: &Wrench,
    w: &CostWeights,
) -> f64 {
    let mut c = 0.0;
    for i in 0..STATE_DIM {
        c += w.q_mean[i] * mean[i] * mean[i] + w.q_cov[i] * cov[(i, i)];
    }
    for i in 0..DOF {
        let e = if w.force_ref_offset { f_mean[i] + f_ref[i] } else { f_mean[i] };
        c += w.q_force[i] * e * e + w.q_force_var[i] * f_var[i] + w.q_input[i] * f_ref[i] * f_ref[i];
    }
    for i in 0..4 {
        c += w.q_tau[i] * tau[i] * tau[i];
    }
    c
}

/// `J Q J^T` for the arm Jacobian at `q`.
pub fn torque_metric(q: &ArmConfig, geom: &ArmGeometry, q_tau: &[f64; 4]) -> Matrix3<f64> {
    let j = jacobian(q, geom);
    j * nalgebra::Matrix4::from_diagonal(&Vector4::from(*q_tau)) * j.transpose()
}

/// Human joint-torque cost when the human supplies the robot's damping force
/// `D * xdot` along the linear axes.
pub fn ergonomic_cost(q: &ArmConfig, geom: &ArmGeometry, damping: &Vec6, vel: &Vec6, q_tau: &[f64; 4]) -> f64 {
    let f = Vector3::new(damping[0] * vel[0], damping[1] * vel[1], damping[2] * vel[2]);
    (f.transpose() * torque_metric(q, geom, q_tau) * f)[0]
}

fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.clone().complex_eigenvalues().iter().all(|e| e.re < 0.0)
}

/// Solve `A^T X + X A + Q = 0` by vectorization.
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension("Lyapunov operands must be square and matching".into()));
    }
    if !is_hurwitz(a) {
        return Err(Error::NotHurwitz(format!("{a}")));
    }
    lyapunov_solve_unchecked(a, q)
}

fn lyapunov_solve_unchecked(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, q.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotHurwitz("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Controllable-canonical realization of the high-pass-filtered admittance
/// `alpha s / ((s + omega) (M s^2 + D s + K))`, with its parameter derivatives.
struct DisturbanceRealization {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    da_dm: DMatrix<f64>,
    da_dd: DMatrix<f64>,
    dc_dm: DMatrix<f64>,
}

fn disturbance_realization(m: f64, d: f64, k: f64, alpha: f64, omega: f64) -> Result<DisturbanceRealization> {
    if !(m > 0.0 && d > 0.0 && k >= 0.0 && omega > 0.0) {
        return Err(Error::NotHurwitz(format!("M = {m}, D = {d}, K = {k}, omega = {omega}")));
    }
    if k == 0.0 {
        // the zero at the origin cancels the free-motion pole
        let (a0, a1) = (omega * d / m, omega + d / m);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -a0, -a1]);
        let da_dm = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, omega * d / (m * m), d / (m * m)]);
        let da_dd = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -omega / m, -1.0 / m]);
        Ok(DisturbanceRealization {
            a,
            b: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 2, &[alpha / m, 0.0]),
            da_dm,
            da_dd,
            dc_dm: DMatrix::from_row_slice(1, 2, &[-alpha / (m * m), 0.0]),
        })
    } else {
        let a0 = omega * k / m;
        let a1 = (omega * d + k) / m;
        let a2 = omega + d / m;
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -a0, -a1, -a2]);
        let m2 = m * m;
        let da_dm = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, omega * k / m2, (omega * d + k) / m2, d / m2]);
        let da_dd = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -omega / m, -1.0 / m]);
        Ok(DisturbanceRealization {
            a,
            b: DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]),
            c: DMatrix::from_row_slice(1, 3, &[0.0, alpha / m, 0.0]),
            da_dm,
            da_dd,
            dc_dm: DMatrix::from_row_slice(1, 3, &[0.0, -alpha / m2, 0.0]),
        })
    }
}

/// Squared H2 norm of the position response to high-pass disturbance force on one axis.
pub fn h2_disturbance_cost(m: f64, d: f64, k: f64, alpha: f64, omega: f64) -> Result<f64> {
    Ok(h2_disturbance_cost_grad(m, d, k, alpha, omega)?.0)
}

/// Value and `(d/dM, d/dD)` of [`h2_disturbance_cost`].
pub fn h2_disturbance_cost_grad(m: f64, d: f64, k: f64, alpha: f64, omega: f64) -> Result<(f64, f64, f64)> {
    let r = disturbance_realization(m, d, k, alpha, omega)?;
    if alpha == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let ctc = r.c.transpose() * &r.c;
    let x = lyapunov_solve_unchecked(&r.a, &ctc)?;
    let value = (r.b.transpose() * &x * &r.b)[(0, 0)];
    let sens = |da: &DMatrix<f64>, dc: Option<&DMatrix<f64>>| -> Result<f64> {
        let mut q = da.transpose() * &x + &x * da;
        if let Some(dc) = dc {
            q += dc.transpose() * &r.c + r.c.transpose() * dc;
        }
        let dx = lyapunov_solve_unchecked(&r.a, &q)?;
        Ok((r.b.transpose() * dx * &r.b)[(0, 0)])
    };
    Ok((value, sens(&r.da_dm, Some(&r.dc_dm))?, sens(&r.da_dd, None)?))
}

/// Constraint scale on the force standard deviation. The literal form uses
/// `erf^-1(1 - eps)`; the strict form is the Gaussian `(1 - eps)` quantile.
pub fn chance_kappa(eps: f64, strict_quantile: bool) -> f64 {
    if strict_quantile {
        std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(1.0 - 2.0 * eps)
    } else {
        statrs::function::erf::erf_inv(1.0 - eps)
    }
}

/// Probability that a Gaussian force stays below a bound placed `kappa`
/// standard deviations above its mean.
pub fn chance_satisfaction_probability(kappa: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(kappa / std::f64::consts::SQRT_2))
}

/// `f_bar - erf^-1(1 - eps) sqrt(f_var) - f_mean`; satisfied when non-negative.
pub fn chance_constraint_residual(f_mean: f64, f_var: f64, f_bar: f64, eps: f64) -> f64 {
    f_bar - chance_kappa(eps, false) * f_var.max(0.0).sqrt() - f_mean
}

/// `D - 2 zeta sqrt(M Ke)`; satisfied when non-negative.
pub fn well_damped_residual(damping: f64, mass: f64, ke: f64, zeta: f64) -> f64 {
    damping - 2.0 * zeta * (mass * ke.max(0.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::human_arm::joint_torque;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn h2_by_frequency_integration(m: f64, d: f64, k: f64, alpha: f64, omega: f64) -> f64 {
        let g2 = |w: f64| {
            let num = alpha * w;
            let den_re1 = omega;
            let den_im1 = w;
            let (re2, im2) = (k - m * w * w, d * w);
            let den_re = den_re1 * re2 - den_im1 * im2;
            let den_im = den_re1 * im2 + den_im1 * re2;
            num * num / (den_re * den_re + den_im * den_im)
        };
        let (lo, hi, n) = (1e-2f64, 1e5f64, 200_000);
        let step = (hi / lo).ln() / (n - 1) as f64;
        let mut acc = 0.0;
        let mut prev_w = lo;
        let mut prev_g = g2(lo);
        for i in 1..n {
            let w = lo * (step * i as f64).exp();
            let g = g2(w);
            acc += 0.5 * (g + prev_g) * (w - prev_w);
            prev_w = w;
            prev_g = g;
        }
        // low tail is flat when the free-motion pole cancels; high tail decays as w^-4
        let low_tail = if k == 0.0 { g2(lo) * lo } else { 0.0 };
        let high_tail = g2(hi) * hi / 3.0;
        (acc + low_tail + high_tail) / std::f64::consts::PI
    }

    #[test]
    fn stage_cost_simple_cases() {
        let w0 = CostWeights { q_mean: [0.0; 12], q_input: [0.0; 6], ..Default::default() };
        let z = stage_cost(&StateVec::zeros(), &StateMat::zeros(), &Wrench::zeros(), &Vec6::zeros(), &Vector4::zeros(), &Wrench::zeros(), &CostWeights::default());
        assert_eq!(z, 0.0);
        let w = CostWeights { q_cov: [1.0; 12], ..w0 };
        let cov = StateMat::from_diagonal(&StateVec::from_fn(|i, _| (i + 1) as f64 * 0.1));
        let c = stage_cost(&StateVec::zeros(), &cov, &Wrench::zeros(), &Vec6::zeros(), &Vector4::zeros(), &Wrench::zeros(), &w);
        assert_relative_eq!(c, (1..=12).map(|i| i as f64 * 0.1).sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn stage_cost_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for offset in [false, true] {
            let mut r = || rng.random_range(-2.0..2.0);
            let mean = StateVec::from_fn(|_, _| r());
            let cov = StateMat::from_fn(|_, _| r());
            let fm = Wrench(Vec6::from_fn(|_, _| r()));
            let fv = Vec6::from_fn(|_, _| r().abs());
            let tau = Vector4::from_fn(|_, _| r());
            let fr = Wrench(Vec6::from_fn(|_, _| r()));
            let w = CostWeights {
                q_mean: std::array::from_fn(|_| r().abs()),
                q_cov: std::array::from_fn(|_| r().abs()),
                q_force: std::array::from_fn(|_| r().abs()),
                q_force_var: std::array::from_fn(|_| r().abs()),
                q_tau: std::array::from_fn(|_| r().abs()),
                q_input: std::array::from_fn(|_| r().abs()),
                force_ref_offset: offset,
            };
            // full matrix forms with explicit diagonal weight matrices
            let qm = StateMat::from_diagonal(&StateVec::from(w.q_mean));
            let qc = StateMat::from_diagonal(&StateVec::from(w.q_cov));
            let qf = nalgebra::Matrix6::from_diagonal(&Vec6::from(w.q_force));
            let qfv = nalgebra::Matrix6::from_diagonal(&Vec6::from(w.q_force_var));
            let qt = nalgebra::Matrix4::from_diagonal(&Vector4::from(w.q_tau));
            let qu = nalgebra::Matrix6::from_diagonal(&Vec6::from(w.q_input));
            let e = if offset { fm.0 + fr.0 } else { fm.0 };
            let reference = (mean.transpose() * qm * mean)[0]
                + (qc * cov).trace()
                + (e.transpose() * qf * e)[0]
                + (qfv * nalgebra::Matrix6::from_diagonal(&fv)).trace()
                + (tau.transpose() * qt * tau)[0]
                + (fr.0.transpose() * qu * fr.0)[0];
            let got = stage_cost(&mean, &cov, &fm, &fv, &tau, &fr, &w);
            assert_relative_eq!(got, reference, max_relative = 1e-12);
        }
    }

    #[test]
    fn ergonomic_cases() {
        let g = ArmGeometry::default();
        let q = ArmConfig(Vector4::new(0.4, 0.2, 0.1, 1.2));
        assert_eq!(ergonomic_cost(&q, &g, &Vec6::repeat(100.0), &Vec6::zeros(), &[1.0; 4]), 0.0);
        let mut v = Vec6::zeros();
        v[2] = 0.3;
        assert!(ergonomic_cost(&ArmConfig::zeros(), &g, &Vec6::repeat(100.0), &v, &[1.0; 4]).abs() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let q = ArmConfig(Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            let d = Vec6::from_fn(|_, _| rng.random_range(10.0..500.0));
            let v = Vec6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let qt: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
            let tau = joint_torque(&q, &g, &Vector3::new(d[0] * v[0], d[1] * v[1], d[2] * v[2]));
            let reference: f64 = (0..4).map(|i| qt[i] * tau[i] * tau[i]).sum();
            assert_relative_eq!(ergonomic_cost(&q, &g, &d, &v, &qt), reference, max_relative = 1e-12);
        }
    }

    #[test]
    fn lyapunov_cases() {
        let x = lyapunov_solve(&(-DMatrix::identity(3, 3)), &DMatrix::identity(3, 3)).unwrap();
        assert!((x - DMatrix::identity(3, 3) * 0.5).abs().max() < 1e-15);
        let x = lyapunov_solve(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-2.0, -5.0])), &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(x[(1, 1)], 0.1, epsilon = 1e-15);
        assert!(x[(0, 1)].abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 50 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-3.0..3.0));
            if !is_hurwitz(&a) {
                continue;
            }
            let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let q = &l * l.transpose();
            let x = lyapunov_solve(&a, &q).unwrap();
            let res = a.transpose() * &x + &x * &a + &q;
            assert!(res.norm() < 1e-9 * q.norm());
            assert!(x.clone().symmetric_eigenvalues().min() > -1e-12);
            checked += 1;
        }
        assert!(matches!(lyapunov_solve(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)), Err(Error::NotHurwitz(_))));
    }

    #[test]
    fn h2_closed_form_case() {
        let v = h2_disturbance_cost(5.0, 500.0, 0.0, 1.0, 10.0).unwrap();
        assert_relative_eq!(v, 0.04 / (2.0 * 10.0 * 100.0 * 110.0), max_relative = 1e-10);
        assert_relative_eq!(v, 1.818e-7, max_relative = 1e-3);
        assert_eq!(h2_disturbance_cost(5.0, 500.0, 0.0, 0.0, 10.0).unwrap(), 0.0);
        assert!(h2_disturbance_cost(5.0, 1000.0, 0.0, 1.0, 10.0).unwrap() < v);
        assert!(h2_disturbance_cost(5.0, 0.0, 0.0, 1.0, 10.0).is_err());
    }

    #[test]
    fn h2_matches_frequency_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for i in 0..20 {
            let m = rng.random_range(1.0..20.0);
            let d = rng.random_range(10.0..2000.0);
            let k = if i % 2 == 0 { 0.0 } else { rng.random_range(100.0..1e5) };
            let alpha = rng.random_range(0.1..10.0);
            let omega = rng.random_range(1.0..500.0);
            let lyap = h2_disturbance_cost(m, d, k, alpha, omega).unwrap();
            let freq = h2_by_frequency_integration(m, d, k, alpha, omega);
            assert_relative_eq!(lyap, freq, max_relative = 1e-3);
        }
    }

    #[test]
    fn h2_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for i in 0..20 {
            let m = rng.random_range(1.0..20.0);
            let d = rng.random_range(10.0..2000.0);
            let k = if i % 2 == 0 { 0.0 } else { rng.random_range(100.0..1e5) };
            let (alpha, omega) = (rng.random_range(0.1..10.0), rng.random_range(1.0..500.0));
            let (_, gm, gd) = h2_disturbance_cost_grad(m, d, k, alpha, omega).unwrap();
            let hm = 1e-6 * m;
            let hd = 1e-6 * d;
            let fm = (h2_disturbance_cost(m + hm, d, k, alpha, omega).unwrap() - h2_disturbance_cost(m - hm, d, k, alpha, omega).unwrap()) / (2.0 * hm);
            let fd = (h2_disturbance_cost(m, d + hd, k, alpha, omega).unwrap() - h2_disturbance_cost(m, d - hd, k, alpha, omega).unwrap()) / (2.0 * hd);
            assert_relative_eq!(gm, fm, max_relative = 1e-4);
            assert_relative_eq!(gd, fd, max_relative = 1e-4);
        }
    }

    #[test]
    fn chance_cases() {
        assert_relative_eq!(chance_constraint_residual(5.0, 4.0, 12.0, 1.0 - 1e-16), 7.0, epsilon = 1e-9);
        let boundary = 12.0 - chance_kappa(0.5, false) * 2.0;
        assert_relative_eq!(boundary, 12.0 - 0.476936 * 2.0, epsilon = 1e-5);
        assert!(chance_constraint_residual(boundary, 4.0, 12.0, 0.5).abs() < 1e-12);
        assert_eq!(chance_constraint_residual(3.0, 0.0, 12.0, 0.5), 9.0);
        assert!(chance_kappa(0.5, true).abs() < 1e-15);
        assert_relative_eq!(chance_satisfaction_probability(chance_kappa(0.05, true)), 0.95, epsilon = 1e-9);
    }

    #[test]
    fn well_damped_cases() {
        assert_eq!(well_damped_residual(10.0, 5.0, 0.0, 1.2), 10.0);
        assert_relative_eq!(1904.9 + well_damped_residual(0.0, 5.0, 126000.0, 1.2), 0.0, epsilon = 0.1);
        assert_relative_eq!(948.7 + well_damped_residual(0.0, 5.0, 45000.0, 1.0), 0.0, epsilon = 0.1);
    }
}
