//! Hot kernels on a one-thread pool against the default pool.
//!
//! Without the `parallel` feature both groups run the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pcp_core::evaluation::knn_accuracy;
use pcp_core::harness::{train_on, Dataset, RunConfig, SyntheticSpec};
use pcp_core::{kmeans_fit, EmbeddingBank};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    vec![
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn data() -> (Dataset, Dataset) {
    SyntheticSpec {
        classes: 10,
        train_per_class: 200,
        test_per_class: 50,
        dim: 32,
        spread: 2.4,
        seed: 0,
    }
    .generate()
    .unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bank = EmbeddingBank::random(20_000, 128, &mut rng).unwrap();
    let query = bank.row(7).to_vec();
    let small = EmbeddingBank::random(2000, 16, &mut rng).unwrap();
    let labels: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let queries = EmbeddingBank::random(500, 16, &mut rng).unwrap();
    let query_labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
    let (train, _) = data();
    let mut config = RunConfig::default();
    config.encoder.hidden_dims = vec![64];
    config.encoder.output_dim = 16;
    config.schedule.total_epochs = 1;
    config.schedule.floor_clusters = 10;

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("all_sims", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| bank.all_sims(&query).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("kmeans", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| kmeans_fit(&small, 10, 3).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("knn", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| knn_accuracy(&small, &labels, 10, &queries, &query_labels, 200, 0.1).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("train_epoch", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| train_on(&config, &train, None, &mut ()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
