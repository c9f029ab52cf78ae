//! Data-parallel kernels under the rayon pool and under a single thread.
//!
//! `cargo bench -p causal-shaping` compares the two pools;
//! `cargo bench -p causal-shaping --no-default-features` measures the
//! sequential fallback build.

use causal_shaping::cmdp::seeded;
use causal_shaping::data::TabularEstimates;
use causal_shaping::diagnostics::{ci_test, CITestConfig};
use causal_shaping::linalg::Matrix;
use causal_shaping::nn::GaussianRegressor;
use causal_shaping::solver::{causal_backup, ValueTable};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use std::hint::black_box;

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|v| v / t).collect()
}

fn estimates(ns: usize, na: usize) -> TabularEstimates {
    let mut rng = seeded(1);
    TabularEstimates {
        propensity: (0..ns).map(|_| simplex(&mut rng, na)).collect(),
        reward: (0..ns).map(|_| (0..na).map(|_| rng.random()).collect()).collect(),
        transition: (0..ns).map(|_| (0..na).map(|_| simplex(&mut rng, ns)).collect()).collect(),
        covered: vec![vec![true; na]; ns],
    }
}

#[cfg(feature = "parallel")]
fn modes() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    vec![("rayon", pool(threads)), ("one-thread", pool(1))]
}

#[cfg(feature = "parallel")]
fn run<T>(pool: &rayon::ThreadPool, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn modes() -> Vec<(&'static str, ())> {
    vec![("sequential", ())]
}

#[cfg(not(feature = "parallel"))]
fn run<T>(_: &(), f: impl FnOnce() -> T) -> T {
    f()
}

fn backup(c: &mut Criterion) {
    let est = estimates(400, 5);
    let v = ValueTable((0..400).map(|i| (i % 17) as f64).collect());
    let mut g = c.benchmark_group("causal_backup_400x5");
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run(&pool, || causal_backup(black_box(&est), &v, 1.0, 0.9).unwrap())));
    }
    g.finish();
}

fn log_lik(c: &mut Criterion) {
    let mut rng = seeded(2);
    let model = GaussianRegressor::new(6, 4, 64, 2, &mut rng).unwrap();
    let n = 1024;
    let xs: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("log_lik_grad_1024");
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&pool, || model.mean_log_lik_grad(&model.params.data, black_box(&xs), &ys, n).unwrap()))
        });
    }
    g.finish();
}

fn permutation_test(c: &mut Criterion) {
    let mut rng = seeded(3);
    let n = 1000;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
    let (x, y) = (Matrix::from_column(&x), Matrix::from_column(&y));
    let cfg = CITestConfig { n_permutations: 100, ..Default::default() };
    let mut g = c.benchmark_group("ci_test_1000x100");
    g.sample_size(10);
    for (name, pool) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run(&pool, || ci_test(black_box(&x), &y, &Matrix::empty(n), &cfg).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, backup, log_lik, permutation_test);
criterion_main!(benches);
