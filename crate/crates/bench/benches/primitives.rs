use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gpmpc_bench::{pose, synthetic_model};
use gpmpc_core::admittance::{discretize, propagate_cov, propagate_cov_vectorized, StateMat};
use gpmpc_core::mpc::h2_disturbance_cost_grad;
use gpmpc_core::{ImpedanceParams, Scheme, Vec6};

fn posterior(c: &mut Criterion) {
    let mut group = c.benchmark_group("posterior_with_grad");
    for points in [20, 80, 200] {
        let model = synthetic_model(points);
        group.bench_with_input(BenchmarkId::from_parameter(points), &model, |b, m| b.iter(|| black_box(m.posterior_with_grad(&pose(0.002)))));
    }
    group.finish();
}

fn covariance(c: &mut Criterion) {
    let dy = discretize(&ImpedanceParams::uniform(5.0, 500.0), 0.01, Scheme::Implicit).unwrap();
    let cov = StateMat::identity() * 1e-4;
    let fv = Vec6::repeat(2.0);
    c.bench_function("propagate_cov", |b| b.iter(|| black_box(propagate_cov(&dy, &cov, &fv))));
    c.bench_function("propagate_cov_vectorized", |b| b.iter(|| black_box(propagate_cov_vectorized(&dy, &cov, &fv))));
}

fn disturbance_cost(c: &mut Criterion) {
    c.bench_function("h2_disturbance_cost_grad", |b| b.iter(|| black_box(h2_disturbance_cost_grad(5.0, 500.0, 15_000.0, 1.0, 94.0).unwrap())));
}

criterion_group!(benches, posterior, covariance, disturbance_cost);
criterion_main!(benches);
