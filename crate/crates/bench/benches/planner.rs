use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use gpmpc_bench::{pose, synthetic_model};
use gpmpc_core::belief::Belief;
use gpmpc_core::mpc::{build_problem, solve, MpcConfig};
use gpmpc_core::{ImpedanceParams, Vec6};

fn planner_step(c: &mut Criterion) {
    let models = vec![synthetic_model(40)];
    let belief = Belief::uniform(1).unwrap();
    let phi = ImpedanceParams::uniform(5.0, 500.0);
    let mut group = c.benchmark_group("planner_step");
    group.sample_size(20);
    for horizon in [5, 10, 20] {
        let cfg = MpcConfig { horizon, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(horizon), &cfg, |b, cfg| {
            b.iter(|| {
                let p = build_problem(cfg, &pose(-0.01), &Vec6::zeros(), &belief, &models, &phi).unwrap();
                black_box(solve(&p, None).unwrap())
            })
        });
    }
    group.finish();
}

fn two_mode_step(c: &mut Criterion) {
    let models = vec![synthetic_model(40), synthetic_model(30)];
    let belief = Belief::new(vec![0.7, 0.3]).unwrap();
    let phi = ImpedanceParams::uniform(5.0, 500.0);
    let mut cfg = MpcConfig { horizon: 10, ..Default::default() };
    cfg.well_damped.enabled = true;
    c.bench_function("planner_step_two_modes_well_damped", |b| {
        b.iter(|| {
            let p = build_problem(&cfg, &pose(0.001), &Vec6::zeros(), &belief, &models, &phi).unwrap();
            black_box(solve(&p, None).unwrap())
        })
    });
}

criterion_group!(benches, planner_step, two_mode_step);
criterion_main!(benches);
