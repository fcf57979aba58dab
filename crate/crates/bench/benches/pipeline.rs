use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gradalign::datagen::{generate, BiasedDatasetSpec};
use gradalign::ecs::{average_precision, partition_batch, score, ScoringConfig};
use gradalign::nn::{Loss, ModelParams};
use gradalign::trainers::{compute_ratio, train, LabelSource, StageTwoConfig, TrainMethod};
use ndarray::s;

fn small_spec() -> BiasedDatasetSpec {
    BiasedDatasetSpec {
        train_size: 2048,
        test_size: 512,
        ..Default::default()
    }
}

fn nn_step(c: &mut Criterion) {
    let (train_set, _) = generate(&small_spec()).unwrap();
    let x = train_set.features();
    let batch = x.slice(s![..256, ..]);
    let y: Vec<usize> = train_set.targets()[..256].to_vec();
    let w = vec![1.0; 256];
    let params = ModelParams::init(&[train_set.feature_dim(), 100, 100, 100, 10], 0).unwrap();
    c.bench_function("forward_backward_b256", |b| {
        b.iter(|| {
            let pass = params.forward(batch).unwrap();
            black_box(params.gradients(&pass, &y, &w, Loss::CrossEntropy).unwrap());
        })
    });
}

fn ecs_pieces(c: &mut Criterion) {
    let p1: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37).fract()).collect();
    let p2: Vec<f64> = (0..256).map(|i| (i as f64 * 0.61).fract()).collect();
    c.bench_function("partition_batch_b256", |b| {
        b.iter(|| black_box(partition_batch(&p1, &p2, 0.5).unwrap()))
    });

    let scores: Vec<f64> = (0..20_000).map(|i| (i as f64 * 0.7548).fract()).collect();
    let truth: Vec<bool> = (0..20_000).map(|i| i % 17 == 0).collect();
    c.bench_function("average_precision_20k", |b| {
        b.iter(|| black_box(average_precision(&scores, &truth).unwrap()))
    });

    let (train_set, _) = generate(&small_spec()).unwrap();
    let cfg = ScoringConfig {
        epochs: 2,
        ..Default::default()
    };
    let mut g = c.benchmark_group("scoring");
    g.sample_size(10);
    g.bench_function("ecs_2_epochs_n2048", |b| b.iter(|| black_box(score(&train_set, &cfg).unwrap())));
    g.finish();
}

fn ga(c: &mut Criterion) {
    let conf: Vec<f64> = (0..13).map(|i| (i as f64 * 0.29).fract()).collect();
    let aligned: Vec<f64> = (0..243).map(|i| 0.9 + 0.1 * (i as f64 * 0.41).fract()).collect();
    c.bench_function("compute_ratio_b256", |b| {
        b.iter(|| black_box(compute_ratio(&conf, &aligned, 1.6, Some(1.0), 1e3).unwrap()))
    });

    let (train_set, test_set) = generate(&small_spec()).unwrap();
    let flags = train_set.conflicting_flags();
    let cfg = StageTwoConfig {
        method: TrainMethod::Ga,
        epochs: 1,
        label_source: LabelSource::GroundTruth,
        ..Default::default()
    };
    let mut g = c.benchmark_group("stage_two");
    g.sample_size(10);
    g.bench_function("ga_1_epoch_n2048", |b| {
        b.iter(|| black_box(train(&train_set, &flags, &test_set, &cfg).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, nn_step, ecs_pieces, ga);
criterion_main!(benches);
