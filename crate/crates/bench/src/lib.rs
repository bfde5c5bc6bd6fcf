//! Shared fixtures for the benchmarks.

use criterion::{black_box, Criterion};
use phantom::analysis::lorenz::lorenz;
use phantom::optim::{loss_and_grad, sam_step, sgd_step, LossKind, TrainConfig, TrainMode};
use phantom::toydata::generate;
use phantom::{ModelState, ToySample, ToySpec};

pub fn batch(n: usize) -> Vec<ToySample> {
    generate(&ToySpec::default())
        .expect("default spec is valid")
        .samples[..n]
        .to_vec()
}

pub fn gradients(c: &mut Criterion) {
    let m = ModelState::init(0);
    let mut g = c.benchmark_group("loss_and_grad");
    for n in [1, 5, 50] {
        let b = batch(n);
        g.bench_function(format!("batch{n}"), |bench| {
            bench.iter(|| loss_and_grad(black_box(&m), &b, LossKind::Logistic).unwrap())
        });
    }
    g.finish();
}

pub fn steps(c: &mut Criterion) {
    let m = ModelState::init(0);
    let b = batch(5);
    for mode in [TrainMode::Sgd, TrainMode::Sam, TrainMode::Lsam] {
        let cfg = TrainConfig {
            mode,
            rho: 0.1,
            ..TrainConfig::default()
        };
        c.bench_function(&format!("step/{}", mode.as_str()), |bench| {
            bench.iter(|| match mode {
                TrainMode::Sgd => sgd_step(black_box(&m), &b, &cfg).unwrap(),
                _ => sam_step(black_box(&m), &b, &cfg).unwrap(),
            })
        });
    }
}

pub fn lorenz_curve(c: &mut Criterion) {
    let w: Vec<f64> = (0..10_000)
        .map(|i| ((i * 7919) % 1000) as f64 + 1.0)
        .collect();
    c.bench_function("lorenz/10k", |bench| {
        bench.iter(|| lorenz(black_box(&w)).unwrap())
    });
}
