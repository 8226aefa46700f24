//! Hot-path benchmarks: one training step of each joint head, the flow
//! likelihood on its own, simulator throughput, and the CRPS kernel.

use criterion::{criterion_group, criterion_main, Criterion};
use flowcast_bench::{bench_instance, bench_model};
use flowcast_core::config::JointKind;
use flowcast_core::gbm::{self, GbmConfig};
use flowcast_core::metrics;
use flowcast_core::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

/// Forward pass plus backward sweep over a full instance, the unit of work
/// one optimizer step repeats per batch element.
fn instance_grad(c: &mut Criterion) {
    let inst = bench_instance();
    for joint in [JointKind::Gaussian, JointKind::Cnf] {
        let model = bench_model(joint);
        c.bench_function(&format!("instance_grad_{joint:?}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = model.params().bind(&mut tape);
                let loss = model.instance_loss(&mut tape, &bound, black_box(&inst)).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
}

fn forecast(c: &mut Criterion) {
    let model = bench_model(JointKind::Cnf);
    let inst = bench_instance();
    c.bench_function("forecast_100_samples", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| black_box(model.forecast(&inst, inst.n_events() - 1, 100, &mut rng).unwrap()))
    });
}

fn simulate(c: &mut Criterion) {
    let cfg = GbmConfig { n_instances: 100, ..GbmConfig::default() };
    c.bench_function("gbm_simulate_100x101", |b| {
        b.iter(|| black_box(gbm::simulate(black_box(&cfg)).unwrap()))
    });
}

fn crps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    c.bench_function("crps_empirical_100", |b| {
        b.iter(|| black_box(metrics::crps_empirical(black_box(&samples), black_box(0.3)).unwrap()))
    });
}

criterion_group!(benches, instance_grad, forecast, simulate, crps);
criterion_main!(benches);
