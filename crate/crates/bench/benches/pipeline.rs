use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lent_bench::{line_model, path, planar_model};
use lent_core::lent_particle::{gamma_rho_mc, gamma_theorem9};
use lent_core::scenarios::{DoleansPair, Scenario};
use lent_core::sde::solve_with_flow;
use lent_core::InverseMethod;

fn flow(c: &mut Criterion) {
    let model = planar_model(30.0).unwrap();
    let config = path(&model, 1).unwrap();
    let scenario = Scenario::by_name("levy-area-1").unwrap();
    let coeffs = scenario.coefficients(&model).unwrap();
    let mut g = c.benchmark_group("levy_area_flow");
    for method in [InverseMethod::DirectSde, InverseMethod::PerStepInverse] {
        g.bench_function(format!("{method:?}"), |b| {
            b.iter(|| {
                solve_with_flow(&coeffs, &model, &config, &scenario.x0, 1.0, scenario.step, method).unwrap()
            })
        });
    }
    g.finish();
    let traj = solve_with_flow(&coeffs, &model, &config, &scenario.x0, 1.0, scenario.step, InverseMethod::DirectSde)
        .unwrap();
    c.bench_function("gamma_theorem9", |b| {
        b.iter(|| gamma_theorem9(black_box(&traj), &coeffs, &scenario.bs, 1.0).unwrap())
    });
}

fn rho(c: &mut Criterion) {
    let model = line_model(30.0).unwrap();
    let config = path(&model, 2).unwrap();
    let pair = DoleansPair { model: model.clone(), t: 1.0 };
    let bs = Scenario::by_name("doleans").unwrap().bs;
    c.bench_function("gamma_rho_mc_1e4", |b| {
        b.iter(|| gamma_rho_mc(&pair, &config, &bs, 10_000, black_box(3)).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let model = planar_model(300.0).unwrap();
    c.bench_function("simulate_300_jumps", |b| b.iter(|| path(&model, black_box(4)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = flow, rho, simulation
}
criterion_main!(benches);
