use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msr_core::par::Execution;
use msr_core::policy::build;
use msr_core::simulator::{simulate_msr, SimConfig};
use msr_core::synthesis::{log_grid, predict_alpha_star, synthesize};
use msr_core::{JobType, Mode, PolicySpec, ResourceVector, Workload};

fn workload(rho: f64) -> Workload {
    let types = vec![
        JobType::new("t1", vec![3.0, 7.0, 1.0], 0.5 * rho, 1.0).unwrap(),
        JobType::new("t2", vec![4.0, 1.0, 1.0], 2.0 * rho, 1.0).unwrap(),
        JobType::new("t3", vec![10.0, 1.0, 5.0], 1.0 * rho, 1.0).unwrap(),
    ];
    Workload::new(ResourceVector::new(vec![20.0, 15.0, 50.0]).unwrap(), types).unwrap()
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn replications(c: &mut Criterion) {
    let w = workload(0.8);
    let s = synthesize(&w).unwrap();
    let mp = build(&PolicySpec::new(Mode::Pmsr, s.candidates, s.pi, 2.0), &w).unwrap();
    let mut group = c.benchmark_group("simulate_msr_8_reps");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut cfg = SimConfig::new(5_000.0, 500.0, 1, 8);
            cfg.execution = exec;
            b.iter(|| simulate_msr(&w, &mp, &cfg, false).unwrap())
        });
    }
    group.finish();
}

fn alpha_grid(c: &mut Criterion) {
    let w = workload(0.9);
    let s = synthesize(&w).unwrap();
    let spec = PolicySpec::new(Mode::Nmsr, s.candidates, s.pi, 1.0);
    let grid = log_grid(1e-3, 0.04, 64);
    let mut group = c.benchmark_group("predict_alpha_star_64");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_alpha_star(&w, &spec, &grid, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replications, alpha_grid);
criterion_main!(benches);
