use criterion::{criterion_group, criterion_main, Criterion};
use lmmderiv::datasets::{sleepstudy, sleepstudy_spec};
use lmmderiv::nalgebra::DMatrix;
use lmmderiv::simulate::{simulate, SimulationSpec};
use lmmderiv::{
    build_design, fit, hessian, sandwich, score_matrix, vcov_full, FitOptions, InfoKind, Method, SandwichOptions,
    ScoreLevel,
};
use std::hint::black_box;

fn sleepstudy_benches(c: &mut Criterion) {
    let spec = sleepstudy_spec();
    let design = build_design(&sleepstudy(&spec).unwrap(), &spec).unwrap();
    c.bench_function("fit_ml", |b| b.iter(|| fit(black_box(&design), &FitOptions::default()).unwrap()));
    c.bench_function("fit_reml", |b| {
        b.iter(|| fit(black_box(&design), &FitOptions::method(Method::Reml)).unwrap())
    });

    let model = fit(&design, &FitOptions::default()).unwrap();
    c.bench_function("scores_level1", |b| b.iter(|| score_matrix(black_box(&model), ScoreLevel::Observation).unwrap()));
    c.bench_function("hessian", |b| b.iter(|| hessian(black_box(&model)).unwrap()));
    c.bench_function("vcov_expected", |b| b.iter(|| vcov_full(black_box(&model), true, InfoKind::Expected).unwrap()));
    c.bench_function("sandwich", |b| b.iter(|| sandwich(black_box(&model), &SandwichOptions::default()).unwrap()));
}

fn simulated_benches(c: &mut Criterion) {
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let spec = SimulationSpec::balanced(200, 10, vec![1.0, -0.5, 0.25], g, 0.7, 7);
    let design = simulate(&spec).unwrap().design().unwrap();
    let mut group = c.benchmark_group("simulated_j200");
    group.sample_size(10);
    group.bench_function("fit_ml", |b| b.iter(|| fit(black_box(&design), &FitOptions::default()).unwrap()));
    let model = fit(&design, &FitOptions::default()).unwrap();
    group.bench_function("sandwich", |b| b.iter(|| sandwich(black_box(&model), &SandwichOptions::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, sleepstudy_benches, simulated_benches);
criterion_main!(benches);
