//! Box-constrained quasi-Newton minimization (projected BFGS).

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug)]
pub struct BoxOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_rel_tol: f64,
}

impl Default for BoxOptions {
    fn default() -> Self {
        BoxOptions { max_iter: 200, grad_tol: 1e-6, f_rel_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct BoxResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Minimize `f` over the box `[lo, hi]`. `f` returns value and gradient;
/// non-finite values are treated as +inf by the line search.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: BoxOptions) -> BoxResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let pg = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg < opts.grad_tol {
            converged = true;
            break;
        }
        let gv = DVector::from_fn(n, |i, _| if free[i] { g[i] } else { 0.0 });
        let mut d = -(&hinv * &gv);
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&gv) >= -1e-16 * gv.norm() * d.norm() {
            hinv = DMatrix::identity(n, n);
            d = -gv.clone();
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut xt: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
            project(&mut xt, lo, hi);
            let step: f64 = (0..n).map(|i| g[i] * (xt[i] - x[i])).sum();
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * step.min(0.0) && gt.iter().all(|v| v.is_finite()) {
                accepted = Some((xt, ft, gt));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else {
            break;
        };
        let s = DVector::from_fn(n, |i, _| xt[i] - x[i]);
        let y = DVector::from_fn(n, |i, _| gt[i] - g[i]);
        let sy = s.dot(&y);
        let df = fx - ft;
        x = xt;
        fx = ft;
        g = gt;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i_n = DMatrix::<f64>::identity(n, n);
            let a = &i_n - rho * &s * y.transpose();
            let b = &i_n - rho * &y * s.transpose();
            hinv = &a * &hinv * &b + rho * &s * s.transpose();
        }
        if df.abs() <= opts.f_rel_tol * fx.abs().max(1.0) && s.norm() < 1e-12 {
            converged = true;
            break;
        }
    }
    BoxResult { x, f: fx, iterations, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let r = minimize_box(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], BoxOptions { max_iter: 500, ..Default::default() });
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r);
    }

    #[test]
    fn active_bound() {
        let f = |x: &[f64]| ((x[0] - 3.0).powi(2) + x[1].powi(2), vec![2.0 * (x[0] - 3.0), 2.0 * x[1]]);
        let r = minimize_box(f, &[0.0, 1.0], &[-1.0, -1.0], &[1.0, 1.0], BoxOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-12 && r.x[1].abs() < 1e-6);
    }
}
