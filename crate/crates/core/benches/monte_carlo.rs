//! Monte Carlo batch throughput on the default pool versus one worker.
//! Build with `--no-default-features` for the rayon-free path.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use v2v_traffic::experiment::{run_batch, Behavior, ExperimentConfig};
use v2v_traffic::parallel;

fn batches(c: &mut Criterion) {
    let mut g = c.benchmark_group("run_batch");
    g.sample_size(10);
    for behavior in [Behavior::Rue, Behavior::V2vRue] {
        let cfg = ExperimentConfig { side: 4, cars: 40, runs: 16, behavior, ..ExperimentConfig::default() };
        let net = Arc::new(cfg.build_network().unwrap());
        let name = format!("{behavior:?}").to_lowercase();
        g.bench_with_input(BenchmarkId::new("pool", &name), &cfg, |b, cfg| {
            b.iter(|| black_box(run_batch(cfg, &net).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("one_worker", &name), &cfg, |b, cfg| {
            b.iter(|| parallel::with_workers(Some(1), || black_box(run_batch(cfg, &net).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, batches);
criterion_main!(benches);
