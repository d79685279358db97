//! Hot-path benchmarks: noise generation, path simulation, projection
//! tables, per-path functionals, kernel regression, and quadrature.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use snfl_core::functionals::{build_projection_set, state_sample};
use snfl_core::noise::NoiseStream;
use snfl_core::paths::{drift_baseline, simulate_sde};
use snfl_core::problem::builtin;
use snfl_core::skeleton::{beta_variance, solve_skeleton};
use snfl_core::stats::{nw_regress_sorted, silverman_bandwidth};

fn bench_noise_fill(c: &mut Criterion) {
    let ns = NoiseStream::new(42);
    let mut buf = vec![0.0; 4096];
    let mut path = 0u64;
    c.bench_function("noise_fill_4096", |b| {
        b.iter(|| {
            path += 1;
            ns.fill_increments(path, 1.0 / 4096.0, &mut buf);
            black_box(buf[0])
        })
    });
}

fn bench_simulate_path(c: &mut Criterion) {
    let p = builtin("P2_sine_drift").unwrap();
    let ns = NoiseStream::new(42);
    let sk = solve_skeleton(&p, 256).unwrap();
    let mut path = 0u64;
    c.bench_function("simulate_path_mesh_256", |b| {
        b.iter(|| {
            path += 1;
            black_box(simulate_sde(&p, 0.2, &ns, path, &sk).unwrap().x)
        })
    });
}

fn bench_projection_tables(c: &mut Criterion) {
    let p = builtin("P2_sine_drift").unwrap();
    let ns = NoiseStream::new(42);
    let sk = solve_skeleton(&p, 64).unwrap();
    c.bench_function("projection_tables_2000x16", |b| {
        b.iter(|| {
            black_box(build_projection_set(&p, 0.2, &sk, &ns, 2000, 16, true, false).unwrap())
        })
    });
}

fn bench_state_functional(c: &mut Criterion) {
    let p = builtin("P2_sine_drift").unwrap();
    let ns = NoiseStream::new(42);
    let sk = solve_skeleton(&p, 128).unwrap();
    let projs = build_projection_set(&p, 0.2, &sk, &ns, 4000, 32, true, false).unwrap();
    let baseline = drift_baseline(&p, 128, 1.0);
    let end = *baseline.last().unwrap();
    let mut path = 1_000_000u64;
    c.bench_function("state_sample_with_gradient", |b| {
        b.iter(|| {
            path += 1;
            let ps = simulate_sde(&p, 0.2, &ns, path, &sk).unwrap();
            black_box(state_sample(&p, &ps, end, &projs, true).unwrap().theta)
        })
    });
}

fn bench_nw_regression(c: &mut Criterion) {
    let ns = NoiseStream::new(42);
    let mut xs = vec![0.0; 20_000];
    ns.fill_increments(7, 1.0, &mut xs);
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rs: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let knots: Vec<f64> = (0..128)
        .map(|k| xs[(k * (xs.len() - 1)) / 127])
        .collect();
    let bw = silverman_bandwidth(&xs);
    c.bench_function("nw_regression_20k_128knots", |b| {
        b.iter(|| black_box(nw_regress_sorted(&xs, &rs, &knots, bw).len()))
    });
}

fn bench_limit_variance(c: &mut Criterion) {
    let p = builtin("P2_sine_drift").unwrap();
    let sk = solve_skeleton(&p, 1024).unwrap();
    c.bench_function("limit_variance_mesh_1024", |b| {
        b.iter(|| black_box(beta_variance(&p, &sk).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_noise_fill,
    bench_simulate_path,
    bench_projection_tables,
    bench_state_functional,
    bench_nw_regression,
    bench_limit_variance
);
criterion_main!(benches);
