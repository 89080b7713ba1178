//! Gaussian-process models of external force over TCP pose.
//!
//! Each force axis is an independent GP with a squared-exponential kernel and
//! either a zero or a hinge prior mean, so the joint predictive covariance is
//! diagonal. Models cache the Cholesky factor of `K + noise_var * I` and are
//! immutable once built.

mod fit;

pub use fit::{fit_axis, fit_hyperparameters, negative_log_likelihood, FitOptions, FitReport, MeanKind};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Mat6, Pose, Vec6, Wrench, DOF};

/// Kernel and observation-noise hyperparameters for one force axis.
///
/// `signal_var` scales the kernel; `noise_var` is the observation noise.
/// Setting both equal recovers the single-variance form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub noise_var: f64,
    pub length_scales: [f64; DOF],
}

impl GpHyper {
    pub fn new(signal_var: f64, noise_var: f64, length_scales: [f64; DOF]) -> Result<Self> {
        let h = GpHyper { signal_var, noise_var, length_scales };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_var >= 0.0 && self.signal_var.is_finite()) {
            return Err(Error::InvalidHyper(format!("signal_var = {}", self.signal_var)));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidHyper(format!("noise_var = {}", self.noise_var)));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidHyper(format!("length scale = {l}")));
        }
        Ok(())
    }
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper { signal_var: 1.0, noise_var: 0.01, length_scales: [0.1; DOF] }
    }
}

/// Squared-exponential kernel with per-coordinate length scales.
pub fn kernel_eval(x: &Pose, x2: &Pose, hyper: &GpHyper) -> f64 {
    hyper.signal_var * (-0.5 * scaled_sq_dist(x, x2, hyper)).exp()
}

fn scaled_sq_dist(x: &Pose, x2: &Pose, hyper: &GpHyper) -> f64 {
    (0..DOF)
        .map(|d| {
            let r = (x[d] - x2[d]) / hyper.length_scales[d];
            r * r
        })
        .sum()
}

/// How the two branches of the hinge meet at the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeForm {
    /// `c1` below the threshold, `c1 + c2 * x` above it (jumps at the threshold).
    #[default]
    Printed,
    /// `c1` below the threshold, `c1 + c2 * (x - c3)` above it.
    Continuous,
}

/// Piecewise-linear prior mean for contact: flat in free space, linear past a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HingeMean {
    pub offset: f64,
    pub slope: f64,
    pub threshold: f64,
    pub axis: usize,
    #[serde(default)]
    pub form: HingeForm,
}

impl HingeMean {
    pub fn new(offset: f64, slope: f64, threshold: f64, axis: usize) -> Self {
        HingeMean { offset, slope, threshold, axis, form: HingeForm::Printed }
    }

    pub fn continuous(offset: f64, slope: f64, threshold: f64, axis: usize) -> Self {
        HingeMean { offset, slope, threshold, axis, form: HingeForm::Continuous }
    }

    fn active(&self, x: &Pose) -> bool {
        x[self.axis] > self.threshold
    }

    pub fn eval(&self, x: &Pose) -> f64 {
        hinge_mean(x, self)
    }

    /// Derivative with respect to the active pose coordinate.
    pub fn dx(&self, x: &Pose) -> f64 {
        if self.active(x) {
            self.slope
        } else {
            0.0
        }
    }

    /// Derivative with respect to `(offset, slope, threshold)`.
    pub fn dparams(&self, x: &Pose) -> [f64; 3] {
        if !self.active(x) {
            return [1.0, 0.0, 0.0];
        }
        let xa = x[self.axis];
        match self.form {
            HingeForm::Printed => [1.0, xa, 0.0],
            HingeForm::Continuous => [1.0, xa - self.threshold, -self.slope],
        }
    }
}

/// Evaluate the hinge prior mean at `x`.
pub fn hinge_mean(x: &Pose, h: &HingeMean) -> f64 {
    if !h.active(x) {
        return h.offset;
    }
    let xa = x[h.axis];
    match h.form {
        HingeForm::Printed => h.offset + h.slope * xa,
        HingeForm::Continuous => h.offset + h.slope * (xa - h.threshold),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFn {
    #[default]
    Zero,
    Hinge(HingeMean),
}

impl MeanFn {
    pub fn eval(&self, x: &Pose) -> f64 {
        match self {
            MeanFn::Zero => 0.0,
            MeanFn::Hinge(h) => h.eval(x),
        }
    }

    pub fn grad(&self, x: &Pose) -> Vec6 {
        let mut g = Vec6::zeros();
        if let MeanFn::Hinge(h) = self {
            g[h.axis] = h.dx(x);
        }
        g
    }
}

/// Serializable content of a single-axis GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisGpData {
    pub inputs: Vec<[f64; DOF]>,
    pub targets: Vec<f64>,
    pub hyper: GpHyper,
    pub mean: MeanFn,
}

/// Single-axis GP with cached factorization.
#[derive(Clone, Debug)]
pub struct AxisGp {
    data: AxisGpData,
    chol: Option<Cholesky<f64, Dyn>>,
    /// `(K + noise I)^-1 (y - m(X))`
    alpha: DVector<f64>,
    jitter: f64,
}

const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Factor `K + noise I`, escalating diagonal jitter on failure.
pub(crate) fn factor_gram(
    inputs: &[Pose],
    hyper: &GpHyper,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    let m = inputs.len();
    let kf = DMatrix::from_fn(m, m, |i, j| kernel_eval(&inputs[i], &inputs[j], hyper));
    let scale = hyper.signal_var + hyper.noise_var;
    for &j in JITTER_LADDER.iter() {
        let mut k = kf.clone();
        for i in 0..m {
            k[(i, i)] += hyper.noise_var + j * scale;
        }
        if let Some(c) = Cholesky::new(k) {
            return Ok((c, kf, j * scale));
        }
    }
    Err(Error::IllConditioned { jitter: 1e-6 * scale })
}

impl AxisGp {
    pub fn new(data: AxisGpData) -> Result<Self> {
        data.hyper.validate()?;
        if data.inputs.len() != data.targets.len() {
            return Err(Error::Dimension(format!(
                "{} inputs vs {} targets",
                data.inputs.len(),
                data.targets.len()
            )));
        }
        if let MeanFn::Hinge(h) = &data.mean {
            if h.axis >= DOF {
                return Err(Error::InvalidHyper(format!("hinge axis {}", h.axis)));
            }
        }
        let m = data.inputs.len();
        if m == 0 {
            return Ok(AxisGp { data, chol: None, alpha: DVector::zeros(0), jitter: 0.0 });
        }
        let poses: Vec<Pose> = data.inputs.iter().map(|p| Pose::from_slice(p)).collect();
        let (chol, _, jitter) = factor_gram(&poses, &data.hyper)?;
        let resid = DVector::from_fn(m, |i, _| data.targets[i] - data.mean.eval(&poses[i]));
        let alpha = chol.solve(&resid);
        Ok(AxisGp { data, chol: Some(chol), alpha, jitter })
    }

    /// GP with no training data: the prior.
    pub fn prior(hyper: GpHyper, mean: MeanFn) -> Result<Self> {
        AxisGp::new(AxisGpData { inputs: vec![], targets: vec![], hyper, mean })
    }

    pub fn data(&self) -> &AxisGpData {
        &self.data
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.data.hyper
    }

    pub fn mean_fn(&self) -> &MeanFn {
        &self.data.mean
    }

    pub fn len(&self) -> usize {
        self.data.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.inputs.is_empty()
    }

    /// Diagonal jitter that was needed to factor the Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn kstar(&self, x: &Pose) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            kernel_eval(&Pose::from_slice(&self.data.inputs[i]), x, &self.data.hyper)
        })
    }

    /// Predictive mean and variance.
    pub fn predict(&self, x: &Pose) -> (f64, f64) {
        let m0 = self.data.mean.eval(x);
        let sf = self.data.hyper.signal_var;
        let Some(chol) = &self.chol else {
            return (m0, sf);
        };
        let ks = self.kstar(x);
        let mean = m0 + ks.dot(&self.alpha);
        let v = chol.l().solve_lower_triangular(&ks).expect("triangular factor");
        let var = (sf - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Predictive mean and variance together with their pose gradients.
    pub fn predict_with_grad(&self, x: &Pose) -> (f64, f64, Vec6, Vec6) {
        let m0 = self.data.mean.eval(x);
        let dm0 = self.data.mean.grad(x);
        let sf = self.data.hyper.signal_var;
        let Some(chol) = &self.chol else {
            return (m0, sf, dm0, Vec6::zeros());
        };
        let ls = &self.data.hyper.length_scales;
        let n = self.len();
        let ks = self.kstar(x);
        // dk_i/dx_d = -k_i (x_d - x_i,d) / l_d^2
        let mut dks = DMatrix::<f64>::zeros(n, DOF);
        for i in 0..n {
            let xi = &self.data.inputs[i];
            for d in 0..DOF {
                dks[(i, d)] = -ks[i] * (x[d] - xi[d]) / (ls[d] * ls[d]);
            }
        }
        let mean = m0 + ks.dot(&self.alpha);
        let dmean = dm0 + dks.tr_mul(&self.alpha).fixed_rows::<DOF>(0).into_owned();
        let w = chol.solve(&ks);
        let l_inv_k = chol.l().solve_lower_triangular(&ks).expect("triangular factor");
        let raw_var = sf - l_inv_k.norm_squared();
        let var = raw_var.max(0.0);
        let dvar = if raw_var > 0.0 {
            -2.0 * dks.tr_mul(&w).fixed_rows::<DOF>(0).into_owned()
        } else {
            Vec6::zeros()
        };
        (mean, var, dmean, dvar)
    }

    /// Row `axis` of the Hessian of the predictive mean. The piecewise-linear
    /// prior mean contributes nothing away from its kink.
    pub fn mean_hessian_row(&self, x: &Pose, axis: usize) -> Vec6 {
        let mut h = Vec6::zeros();
        if self.chol.is_none() {
            return h;
        }
        let ls = &self.data.hyper.length_scales;
        let li2 = ls[axis] * ls[axis];
        for (m, xi) in self.data.inputs.iter().enumerate() {
            let ka = kernel_eval(&Pose::from_slice(xi), x, &self.data.hyper) * self.alpha[m];
            let di = (x[axis] - xi[axis]) / li2;
            for d in 0..DOF {
                let dd = (x[d] - xi[d]) / (ls[d] * ls[d]);
                h[d] += ka * (di * dd - if d == axis { 1.0 / li2 } else { 0.0 });
            }
        }
        h
    }
}

/// Six independent per-axis GPs mapping pose to wrench.
#[derive(Clone, Debug)]
pub struct GpForceModel {
    axes: Vec<AxisGp>,
}

/// Serialized form of a [`GpForceModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpForceModelData {
    #[serde(default)]
    pub label: Option<String>,
    pub axes: Vec<AxisGpData>,
}

impl GpForceModel {
    pub fn new(axes: Vec<AxisGp>) -> Result<Self> {
        if axes.len() != DOF {
            return Err(Error::Dimension(format!("expected {DOF} axis models, got {}", axes.len())));
        }
        Ok(GpForceModel { axes })
    }

    /// All-prior model: zero mean, given hyperparameters, no data.
    pub fn prior(hyper: GpHyper) -> Self {
        let axes = (0..DOF).map(|_| AxisGp::prior(hyper, MeanFn::Zero).expect("valid hyper")).collect();
        GpForceModel { axes }
    }

    pub fn from_data(data: &GpForceModelData) -> Result<Self> {
        let axes = data.axes.iter().cloned().map(AxisGp::new).collect::<Result<Vec<_>>>()?;
        GpForceModel::new(axes)
    }

    pub fn to_data(&self, label: Option<String>) -> GpForceModelData {
        GpForceModelData { label, axes: self.axes.iter().map(|a| a.data.clone()).collect() }
    }

    pub fn axis(&self, i: usize) -> &AxisGp {
        &self.axes[i]
    }

    pub fn axes(&self) -> &[AxisGp] {
        &self.axes
    }

    /// Per-axis predictive mean and variance.
    pub fn posterior(&self, x: &Pose) -> (Wrench, Vec6) {
        let mut mean = Vec6::zeros();
        let mut var = Vec6::zeros();
        for (i, a) in self.axes.iter().enumerate() {
            let (m, v) = a.predict(x);
            mean[i] = m;
            var[i] = v;
        }
        (Wrench(mean), var)
    }

    /// Jacobians of the predictive mean and variance: row = force axis, column = pose coordinate.
    pub fn posterior_grad(&self, x: &Pose) -> (Mat6, Mat6) {
        let (_, _, dm, dv) = self.posterior_with_grad(x);
        (dm, dv)
    }

    pub fn posterior_with_grad(&self, x: &Pose) -> (Wrench, Vec6, Mat6, Mat6) {
        let mut mean = Vec6::zeros();
        let mut var = Vec6::zeros();
        let mut dm = Mat6::zeros();
        let mut dv = Mat6::zeros();
        for (i, a) in self.axes.iter().enumerate() {
            let (m, v, gm, gv) = a.predict_with_grad(x);
            mean[i] = m;
            var[i] = v;
            dm.set_row(i, &gm.transpose());
            dv.set_row(i, &gv.transpose());
        }
        (Wrench(mean), var, dm, dv)
    }

    /// Environment stiffness along `axis`: magnitude of the mean-force slope.
    ///
    /// Returns `|d mu_axis / d x_axis|`, which is zero in free space and the
    /// contact spring rate in contact regardless of the sign convention of the
    /// measured wrench.
    pub fn estimate_stiffness(&self, x: &Pose, axis: usize) -> f64 {
        let (_, _, g, _) = self.axes[axis].predict_with_grad(x);
        g[axis].abs()
    }
}
