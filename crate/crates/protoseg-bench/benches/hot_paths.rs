//! Benchmarks for the pipeline's hot paths: encoding, prototype clustering,
//! query prediction, and one full fine-tuning step (graph build, backward
//! pass, and parameter update).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use protoseg::{
    downsample_mask, encode, finetune, generate_prototypes, kmeans, predict_query,
    split_class_features, FineTuneConfig, Strategy,
};
use protoseg_bench::{bench_encoder, bench_episode, bench_features, bench_image};

fn encode_image(c: &mut Criterion) {
    let enc = bench_encoder();
    let img = bench_image();
    c.bench_function("encode 64x64 -> 16x16x64", |b| {
        b.iter(|| encode(&enc, black_box(&img)).unwrap())
    });
}

fn kmeans_features(c: &mut Criterion) {
    let feats = bench_features(256, 64);
    let vectors: Vec<_> = feats.rows().into_iter().map(|r| r.to_owned()).collect();
    c.bench_function("kmeans 256x64 c=5", |b| {
        b.iter(|| kmeans(black_box(&vectors), 5, 11, 100).unwrap())
    });
}

fn predict(c: &mut Criterion) {
    let enc = bench_encoder();
    let ep = bench_episode();
    let s = &ep.support.samples[0];
    let fmap = encode(&enc, &s.image).unwrap();
    let (h, w, _) = fmap.dims();
    let down = downsample_mask(&s.mask, (h, w)).unwrap();
    let sets = split_class_features(&fmap, &down, ep.n_classes).unwrap();
    let protos = generate_prototypes(&sets, 5, 0.5, 3).unwrap();
    let q = encode(&enc, &ep.query.samples[0].image).unwrap();
    c.bench_function("predict 16x16 query vs 2x5 prototypes", |b| {
        b.iter(|| predict_query(black_box(&q), black_box(&protos), 20.0).unwrap())
    });
}

fn finetune_step(c: &mut Criterion) {
    let enc = bench_encoder();
    let ep = bench_episode();
    let cfg = FineTuneConfig {
        strategy: Strategy::Cpc,
        iterations: 1,
        lr: 1e-4,
        seed: 1,
        ..FineTuneConfig::default()
    };
    c.bench_function("one cpc step (build + backward + update)", |b| {
        b.iter(|| finetune(black_box(&enc), black_box(&ep), black_box(&cfg)).unwrap())
    });
}

criterion_group! {
    name = hot_paths;
    config = Criterion::default().sample_size(20);
    targets = encode_image, kmeans_features, predict, finetune_step
}
criterion_main!(hot_paths);
