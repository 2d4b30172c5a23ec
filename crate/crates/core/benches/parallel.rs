use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedchain::exec::Exec;
use fedchain::experiment::{run_benchmark, BenchmarkSpec};
use fedchain::fedavg::aggregate;
use fedchain::trainer::{init_params, train_local, TrainSpec};
use fedchain::{Address, BlobSpec};

fn small_grid() -> BenchmarkSpec {
    BenchmarkSpec {
        data_fractions: vec![0.5, 1.0],
        update_epochs: vec![5, 10],
        model_counts: vec![2, 4],
        total_epochs: 10,
        blobs: BlobSpec {
            samples: 800,
            ..BlobSpec::default()
        },
        test_samples: 400,
        ..BenchmarkSpec::default()
    }
}

fn grid(c: &mut Criterion) {
    let spec = small_grid();
    let mut g = c.benchmark_group("benchmark_grid");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| run_benchmark(&spec, exec).unwrap())
        });
    }
    g.finish();
}

fn federated_round(c: &mut Criterion) {
    let spec = small_grid();
    let model = spec.model();
    let shards = spec.blobs.generate().partition(8).unwrap();
    let start = init_params(&model);
    let train = TrainSpec {
        epochs: 2,
        batch_size: 32,
        learning_rate: 0.05,
        seed: 1,
    };
    let mut g = c.benchmark_group("federated_round_8_clients");
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let updates: Vec<_> = exec.map_range(shards.len(), |i| {
                    train_local(&model, &start, &shards[i], &train, Address([i as u8; 20]), 0).unwrap()
                });
                aggregate(&updates).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, grid, federated_round);
criterion_main!(benches);
