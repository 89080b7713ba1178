//! Shared fixtures for the benchmarks.

use gpmpc_core::gp::{AxisGp, AxisGpData, GpForceModel, GpHyper, HingeMean, MeanFn};
use gpmpc_core::{Pose, Vec6, DOF};

/// Deterministic force model with `points` training samples per axis and a
/// contact hinge on the first axis.
pub fn synthetic_model(points: usize) -> GpForceModel {
    let axes = (0..DOF)
        .map(|axis| {
            let inputs: Vec<[f64; DOF]> = (0..points)
                .map(|i| {
                    let s = i as f64 / points.max(1) as f64;
                    [0.06 * s - 0.03, 0.02 * (7.0 * s).sin(), 0.01 * (3.0 * s).cos(), 0.0, 0.0, 0.0]
                })
                .collect();
            let targets = inputs.iter().map(|x| if axis == 0 { -15_000.0 * x[0].max(0.0) } else { 0.5 * (40.0 * x[1]).sin() }).collect();
            let mean = if axis == 0 { MeanFn::Hinge(HingeMean::continuous(0.0, -15_000.0, 0.0, 0)) } else { MeanFn::Zero };
            AxisGp::new(AxisGpData {
                inputs,
                targets,
                hyper: GpHyper { signal_var: 4.0, noise_var: 0.25, length_scales: [0.01, 0.02, 0.02, 1.0, 1.0, 1.0] },
                mean,
            })
            .expect("synthetic model factors")
        })
        .collect();
    GpForceModel::new(axes).expect("six axes")
}

pub fn pose(x: f64) -> Pose {
    let mut p = Vec6::zeros();
    p[0] = x;
    Pose(p)
}
