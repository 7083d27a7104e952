//! Batch evaluation on one worker versus the rayon pool.
//!
//! Build with `--no-default-features` to time the sequential fallback on its
//! own; both cases then take the same path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vanish_core::attack::{AttackConfig, AttackMode};
use vanish_core::detector::{Detector, ToyDetector};
use vanish_core::harness::{load_dataset, run_batch, write_corpus, RunConfig};
use vanish_core::scene::SyntheticCorpus;

fn batch(c: &mut Criterion) {
    let det = ToyDetector::bundled();
    let dir = tempfile::tempdir().expect("temp dir");
    write_corpus(
        &SyntheticCorpus::new(77, 8),
        det.category_names(),
        dir.path(),
    )
    .expect("corpus");
    let manifest = load_dataset(dir.path(), det.category_names()).expect("dataset");
    let mut config = RunConfig::new(AttackConfig {
        max_iterations: 10,
        ..AttackConfig::new(AttackMode::All, 2.0 / 255.0)
    });
    config.baselines.clear();

    let mut group = c.benchmark_group("run_batch");
    group.sample_size(10);
    for (name, workers) in [("sequential", 1), ("parallel", 0)] {
        config.workers = workers;
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, cfg| {
            b.iter(|| run_batch(&det, &manifest, cfg).expect("batch runs"))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
