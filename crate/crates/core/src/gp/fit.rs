//! Hyperparameter fitting by regularized negative log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{factor_gram, AxisGp, AxisGpData, GpForceModel, GpHyper, HingeForm, HingeMean, MeanFn};
use crate::error::{Error, Result};
use crate::optim::{minimize_box, BoxOptions};
use crate::types::{Pose, DOF};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    #[default]
    Zero,
    Hinge,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub init: GpHyper,
    /// Initial hinge constants; estimated from data when `None`.
    pub hinge_init: Option<(f64, f64, f64)>,
    pub hinge_form: HingeForm,
    pub signal_var_bounds: (f64, f64),
    pub noise_var_bounds: (f64, f64),
    pub length_scale_bounds: (f64, f64),
    /// L2 weight pulling log-hyperparameters (and scaled hinge constants) toward the initial values.
    pub regularization: f64,
    pub starts: usize,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            init: GpHyper::default(),
            hinge_init: None,
            hinge_form: HingeForm::Continuous,
            signal_var_bounds: (1e-6, 1e6),
            noise_var_bounds: (1e-6, 1e4),
            length_scale_bounds: (1e-4, 10.0),
            regularization: 0.1,
            starts: 3,
            max_iter: 150,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub axis: usize,
    pub nll_init: f64,
    pub nll_final: f64,
}

/// Negative log marginal likelihood of `targets` under the given GP prior.
pub fn negative_log_likelihood(inputs: &[Pose], targets: &[f64], hyper: &GpHyper, mean: &MeanFn) -> Result<f64> {
    nll_and_grad(inputs, targets, hyper, mean, false).map(|(v, _)| v)
}

/// Gradient order: ln signal_var, ln noise_var, ln l_0..l_5, hinge (c1, c2, c3).
fn nll_and_grad(
    inputs: &[Pose],
    targets: &[f64],
    hyper: &GpHyper,
    mean: &MeanFn,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let m = inputs.len();
    let (chol, kf, _) = factor_gram(inputs, hyper)?;
    let r = DVector::from_fn(m, |i, _| targets[i] - mean.eval(&inputs[i]));
    let alpha = chol.solve(&r);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let nll = 0.5 * r.dot(&alpha) + logdet + 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
    if !want_grad {
        return Ok((nll, vec![]));
    }
    let mut grad = vec![0.0; 2 + DOF + 3];
    // dNLL/dθ = -0.5 tr((a a^T - K^-1) dK/dθ)
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - &kinv;
    let dot = |a: &DMatrix<f64>| -> f64 { -0.5 * w.component_mul(a).sum() };
    grad[0] = dot(&kf);
    grad[1] = -0.5 * hyper.noise_var * (alpha.norm_squared() - kinv.trace());
    for d in 0..DOF {
        let l2 = hyper.length_scales[d] * hyper.length_scales[d];
        if inputs.iter().all(|p| p[d] == inputs[0][d]) {
            continue;
        }
        let dk = DMatrix::from_fn(m, m, |i, j| {
            let diff = inputs[i][d] - inputs[j][d];
            kf[(i, j)] * diff * diff / l2
        });
        grad[2 + d] = dot(&dk);
    }
    if let MeanFn::Hinge(h) = mean {
        for (i, x) in inputs.iter().enumerate() {
            let dp = h.dparams(x);
            for k in 0..3 {
                grad[2 + DOF + k] -= dp[k] * alpha[i];
            }
        }
    }
    Ok((nll, grad))
}

/// Initial hinge constants: threshold by a least-squares scan over candidate
/// knee locations, then free-space level and contact slope by regression.
fn hinge_initial_guess(inputs: &[Pose], targets: &[f64], axis: usize) -> (f64, f64, f64) {
    let mut xs: Vec<f64> = inputs.iter().map(|p| p[axis]).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let mean_all = targets.iter().sum::<f64>() / targets.len() as f64;
    if hi - lo <= 0.0 {
        return (mean_all, 0.0, hi);
    }
    let mut best = (f64::INFINITY, (mean_all, 0.0, hi));
    for k in 1..100 {
        let q = xs[(k * (xs.len() - 1)) / 100];
        // regress f ~ c1 + c2 * max(0, x - q)
        let (mut s1, mut sz, mut szz, mut sy, mut szy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, &y) in inputs.iter().zip(targets) {
            let z = (p[axis] - q).max(0.0);
            s1 += 1.0;
            sz += z;
            szz += z * z;
            sy += y;
            szy += z * y;
        }
        let det = s1 * szz - sz * sz;
        if det.abs() < 1e-300 {
            continue;
        }
        let c2 = (s1 * szy - sz * sy) / det;
        let c1 = (sy - c2 * sz) / s1;
        let sse: f64 = inputs
            .iter()
            .zip(targets)
            .map(|(p, &y)| (y - c1 - c2 * (p[axis] - q).max(0.0)).powi(2))
            .sum();
        if sse < best.0 {
            best = (sse, (c1, c2, q));
        }
    }
    best.1
}

/// Fit one force axis. Returns the model and NLL before/after.
pub fn fit_axis(
    inputs: &[Pose],
    targets: &[f64],
    axis: usize,
    kind: MeanKind,
    opts: &FitOptions,
) -> Result<(AxisGp, FitReport)> {
    if inputs.is_empty() {
        return Err(Error::EmptyData(format!("no samples for force axis {axis}")));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Dimension("inputs and targets differ in length".into()));
    }
    opts.init.validate()?;
    let init_mean = match kind {
        MeanKind::Zero => MeanFn::Zero,
        MeanKind::Hinge => {
            let (c1, c2, c3) = opts
                .hinge_init
                .unwrap_or_else(|| hinge_initial_guess(inputs, targets, axis));
            MeanFn::Hinge(HingeMean { offset: c1, slope: c2, threshold: c3, axis, form: opts.hinge_form })
        }
    };
    let nll_init = negative_log_likelihood(inputs, targets, &opts.init, &init_mean)?;
    if !nll_init.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }

    // scales for the hinge constants
    let ystd = {
        let mu = targets.iter().sum::<f64>() / targets.len() as f64;
        (targets.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / targets.len() as f64).sqrt().max(1e-3)
    };
    let (xlo, xhi) = inputs
        .iter()
        .map(|p| p[axis])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let xrange = (xhi - xlo).max(1e-3);
    let (hinge0, hinge_scale) = match init_mean {
        MeanFn::Hinge(h) => ([h.offset, h.slope, h.threshold], [ystd, h.slope.abs().max(ystd / xrange), xrange]),
        MeanFn::Zero => ([0.0; 3], [1.0; 3]),
    };
    let n_hinge = if kind == MeanKind::Hinge { 3 } else { 0 };
    let n = 2 + DOF + n_hinge;

    let theta0: Vec<f64> = {
        let mut t = vec![opts.init.signal_var.ln(), opts.init.noise_var.ln()];
        t.extend(opts.init.length_scales.iter().map(|l| l.ln()));
        t.extend(std::iter::repeat_n(0.0, n_hinge));
        t
    };
    let mut lo = vec![opts.signal_var_bounds.0.ln(), opts.noise_var_bounds.0.ln()];
    let mut hi = vec![opts.signal_var_bounds.1.ln(), opts.noise_var_bounds.1.ln()];
    lo.extend(std::iter::repeat_n(opts.length_scale_bounds.0.ln(), DOF));
    hi.extend(std::iter::repeat_n(opts.length_scale_bounds.1.ln(), DOF));
    // hinge constants in scaled units relative to init
    lo.extend([-1e3, -10.0, -(xlo - hinge0[2]).abs() / xrange - 1.0].iter().take(n_hinge));
    hi.extend([1e3, 10.0, (xhi - hinge0[2]).abs() / xrange + 1.0].iter().take(n_hinge));

    let decode = |t: &[f64]| -> (GpHyper, MeanFn) {
        let mut ls = [0.0; DOF];
        for d in 0..DOF {
            ls[d] = t[2 + d].exp();
        }
        let hyper = GpHyper { signal_var: t[0].exp(), noise_var: t[1].exp(), length_scales: ls };
        let mean = match init_mean {
            MeanFn::Zero => MeanFn::Zero,
            MeanFn::Hinge(h) => MeanFn::Hinge(HingeMean {
                offset: hinge0[0] + t[2 + DOF] * hinge_scale[0],
                slope: hinge0[1] + t[3 + DOF] * hinge_scale[1],
                threshold: hinge0[2] + t[4 + DOF] * hinge_scale[2],
                ..h
            }),
        };
        (hyper, mean)
    };

    let reg = opts.regularization;
    let objective = |t: &[f64], base: &[f64]| -> (f64, Vec<f64>) {
        let (hyper, mean) = decode(t);
        match nll_and_grad(inputs, targets, &hyper, &mean, true) {
            Ok((v, g)) => {
                let mut grad = vec![0.0; n];
                grad[..2 + DOF].copy_from_slice(&g[..2 + DOF]);
                for k in 0..n_hinge {
                    grad[2 + DOF + k] = g[2 + DOF + k] * hinge_scale[k];
                }
                let mut val = v;
                for i in 0..n {
                    let dlt = t[i] - base[i];
                    val += reg * dlt * dlt;
                    grad[i] += 2.0 * reg * dlt;
                }
                (val, grad)
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; n]),
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let starts = opts.starts.max(1);
    let box_opts = BoxOptions { max_iter: opts.max_iter, grad_tol: 1e-5, ..Default::default() };
    for s in 0..starts {
        let mut start = theta0.clone();
        // start 0 at init, then shorter/longer length scales with matching signal level
        let shift = match s {
            0 => 0.0,
            1 => -(3.0f64).ln(),
            2 => (3.0f64).ln(),
            k => (k as f64 - 1.5) * 0.5,
        };
        for d in 0..DOF {
            start[2 + d] = (start[2 + d] + shift).clamp(lo[2 + d], hi[2 + d]);
        }
        let r = minimize_box(|t| objective(t, &theta0), &start, &lo, &hi, box_opts);
        if r.f.is_finite() && best.as_ref().is_none_or(|(f, _)| r.f < *f) {
            best = Some((r.f, r.x));
        }
    }
    let (_, theta) = best.ok_or(Error::NonFiniteLikelihood)?;
    let (hyper, mean) = decode(&theta);
    let nll_final = negative_log_likelihood(inputs, targets, &hyper, &mean)?;
    let gp = AxisGp::new(AxisGpData {
        inputs: inputs.iter().map(|p| p.0.into()).collect(),
        targets: targets.to_vec(),
        hyper,
        mean,
    })?;
    Ok((gp, FitReport { axis, nll_init, nll_final }))
}

/// Fit all six force axes from `(pose, wrench)` samples.
///
/// When the hinge mean is selected it is applied to every axis, each acting
/// on its own pose coordinate.
pub fn fit_hyperparameters(
    poses: &[Pose],
    forces: &[[f64; DOF]],
    kind: MeanKind,
    opts: &FitOptions,
) -> Result<(GpForceModel, Vec<FitReport>)> {
    if poses.is_empty() {
        return Err(Error::EmptyData("no demonstration samples".into()));
    }
    let mut axes = Vec::with_capacity(DOF);
    let mut reports = Vec::with_capacity(DOF);
    for axis in 0..DOF {
        let targets: Vec<f64> = forces.iter().map(|f| f[axis]).collect();
        let (gp, rep) = fit_axis(poses, &targets, axis, kind, opts)?;
        axes.push(gp);
        reports.push(rep);
    }
    Ok((GpForceModel::new(axes)?, reports))
}
