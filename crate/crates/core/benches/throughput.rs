//! Sequential vs rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use std::hint::black_box;

use xmodal::distance::pairwise_distances_with;
use xmodal::eval::{evaluate_with, ProtocolConfig};
use xmodal::mining::mine_batch_with;
use xmodal::seed::rng_from_seed;
use xmodal::trainer::{generate_synthetic, SyntheticSpec};
use xmodal::{CmBatch, CmBatchSpec, Execution, Matrix};

const POLICIES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

fn bench_distances(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_distances");
    for n in [64usize, 512] {
        let m = random_matrix(n, 128, 1);
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, n), &m, |b, m| {
                b.iter(|| pairwise_distances_with(black_box(m), exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_mining(c: &mut Criterion) {
    let mut group = c.benchmark_group("mine_batch");
    for (p, k) in [(8usize, 4usize), (32, 8)] {
        let spec = CmBatchSpec::new(p, k).unwrap();
        let batch = CmBatch::from_layout(
            spec,
            (0..spec.batch_size()).collect(),
            (0..p as u32).collect(),
        )
        .unwrap();
        let emb = random_matrix(spec.batch_size(), 64, 2);
        let dmat = pairwise_distances_with(&emb, Execution::Sequential).unwrap();
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, spec.batch_size()), &dmat, |b, d| {
                b.iter(|| mine_batch_with(&batch, black_box(d), exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    let ds = generate_synthetic(&SyntheticSpec {
        num_identities: 200,
        samples_per_identity_per_modality: 8,
        input_dim: 64,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let proto = ProtocolConfig {
        trials: 2,
        ..ProtocolConfig::default()
    };
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| evaluate_with(black_box(&ds), &proto, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_distances, bench_mining, bench_eval);
criterion_main!(benches);
