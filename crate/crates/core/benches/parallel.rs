use criterion::{criterion_group, criterion_main, Criterion};

use maas_equilibrium::scenarios;
use maas_equilibrium::solver::{self, SolverOptions};

fn game_map_evaluation(c: &mut Criterion) {
    let scenario = scenarios::load("small_with_maas").unwrap();
    let mut group = c.benchmark_group("game_map_evaluation");
    for sequential in [false, true] {
        let mut ev = scenario.evaluator().unwrap();
        ev.sequential = sequential;
        let y = ev.default_start();
        ev.eval(&y).unwrap();
        let label = if sequential { "sequential" } else { "parallel" };
        group.bench_function(label, |b| {
            b.iter(|| ev.eval(std::hint::black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn extragradient_burst(c: &mut Criterion) {
    let scenario = scenarios::load("small_with_maas").unwrap();
    let opts = SolverOptions {
        max_iterations: 50,
        trace_stride: usize::MAX,
        ..scenario.solver.clone()
    };
    let mut group = c.benchmark_group("extragradient_50_iterations");
    group.sample_size(10);
    for sequential in [false, true] {
        let label = if sequential { "sequential" } else { "parallel" };
        group.bench_function(label, |b| {
            b.iter(|| {
                let mut ev = scenario.evaluator().unwrap();
                ev.sequential = sequential;
                solver::solve(&mut ev, None, &opts).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, game_map_evaluation, extragradient_burst);
criterion_main!(benches);
