//! Sequential vs data-parallel execution of the batch-shaped hot paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use atomotion::decompose::{decompose_batch, default_descriptors, ConversionThresholds};
use atomotion::exec::Execution;
use atomotion::motion::MotionSequence;
use atomotion::rvq::{featurize_batch, train_codebooks, RvqTrainConfig};
use atomotion::synthetic::{synthesize, Action};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus(copies: usize) -> Vec<MotionSequence> {
    (0..copies)
        .flat_map(|c| {
            Action::GALLERY
                .iter()
                .enumerate()
                .map(move |(i, a)| synthesize(a, 120, 20.0, 0.003, (c * 100 + i) as u64))
        })
        .collect()
}

fn bench_decompose(c: &mut Criterion) {
    let motions = corpus(4);
    let defs = default_descriptors(motions[0].skeleton()).unwrap();
    let thresholds = ConversionThresholds::default();
    let mut group = c.benchmark_group("decompose_batch");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| decompose_batch(black_box(&motions), &defs, &thresholds, 4, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_codebooks(c: &mut Criterion) {
    let features = featurize_batch(&corpus(4), 2, Execution::Parallel).unwrap();
    let mut cfg = RvqTrainConfig::new(32, 2, 1);
    cfg.iterations = 10;
    let mut group = c.benchmark_group("train_codebooks");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_codebooks(black_box(&features), &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let features = featurize_batch(&corpus(4), 2, Execution::Parallel).unwrap();
    let mut cfg = RvqTrainConfig::new(64, 3, 2);
    cfg.iterations = 5;
    let model = train_codebooks(&features, &cfg, Execution::Parallel).unwrap();
    let mut group = c.benchmark_group("encode");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.encode_with(black_box(&features), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_decompose, bench_codebooks, bench_encode);
criterion_main!(benches);
