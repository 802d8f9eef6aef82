use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use eventformer::metrics::{evaluate, pair_by_id, ArOptions};
use eventformer::setmatch::hungarian;
use eventformer::train::sample_gradients;
use eventformer::{Model, RunConfig};
use eventformer_bench::{random_costs, sequences};

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [10, 50, 100, 200] {
        let cost = random_costs(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let sample = &sequences(1, 0)[0];
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    for n0 in [10, 100] {
        let model = Model::new(&RunConfig { n0, ..RunConfig::default() }).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", n0), &model, |b, m| {
            b.iter(|| m.predict(black_box(&sample.features)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n0), &model, |b, m| {
            b.iter(|| sample_gradients(m, black_box(sample), 0).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let samples = sequences(200, 1);
    let model = Model::new(&RunConfig { n0: 10, tau_infer: 0.01, ..RunConfig::default() }).unwrap();
    let dets = eventformer::decode::detect_all(&model, &samples).unwrap();
    let inputs = pair_by_id(&samples, &dets).unwrap();
    c.bench_function("evaluate_200_sequences", |b| {
        b.iter(|| evaluate(black_box(&inputs), 4, ArOptions::default()))
    });
}

criterion_group!(benches, bench_hungarian, bench_model, bench_metrics);
criterion_main!(benches);
