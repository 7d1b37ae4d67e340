use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use textloop_bench::{consistency_graph, simulated_session};
use textloop_core::association::{solve_exact, solve_relaxed};
use textloop_core::pipeline::{detect_all, optimize_trajectory, DetectorParams};
use textloop_core::pose_graph::OptimizerParams;
use textloop_core::simulator::Scenario;

fn solvers(c: &mut Criterion) {
    let mut group = c.benchmark_group("consistent_set");
    for n in [8, 16, 24] {
        let g = consistency_graph(n, n / 3, 7);
        group.bench_with_input(BenchmarkId::new("exact", n), &g, |b, g| b.iter(|| solve_exact(black_box(g))));
        group.bench_with_input(BenchmarkId::new("relaxed", n), &g, |b, g| b.iter(|| solve_relaxed(black_box(g), 1)));
    }
    group.finish();
}

fn session(c: &mut Criterion) {
    let out = simulated_session(Scenario::Corridor, 5);
    let loops = detect_all(&out.records, DetectorParams::default()).unwrap().constraints().to_vec();
    let mut group = c.benchmark_group("session");
    group.sample_size(10);
    group.bench_function("detect_corridor", |b| {
        b.iter(|| detect_all(black_box(&out.records), DetectorParams::default()).unwrap())
    });
    group.bench_function("optimize_corridor", |b| {
        b.iter(|| optimize_trajectory(black_box(&out.odometry), &loops, &OptimizerParams::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, solvers, session);
criterion_main!(benches);
