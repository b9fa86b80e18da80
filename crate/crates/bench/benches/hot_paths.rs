use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use glad_bench::{desk_model, scene};
use glad_core::config::ModelConfig;
use glad_core::geometry::{crop_region, giou, iou, BoundingBox, Unit};
use glad_core::metrics::success_auc;
use glad_core::tracker::Tracker;
use glad_core::training::{synthetic_sequences, TrainConfig, TrainSet, Trainer};

fn geometry(c: &mut Criterion) {
    let a = BoundingBox::xywh(10.0, 12.0, 30.0, 20.0, Unit::Pixel);
    let b = BoundingBox::xywh(18.0, 5.0, 25.0, 40.0, Unit::Pixel);
    c.bench_function("iou", |bench| {
        bench.iter(|| iou(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("giou", |bench| {
        bench.iter(|| giou(black_box(&a), black_box(&b)).unwrap())
    });

    let seq = scene(0);
    let frame = seq.frame(0).unwrap();
    let anchor = seq.first_box().unwrap();
    c.bench_function("crop_region 64px", |bench| {
        bench.iter(|| crop_region(black_box(&frame), &anchor, 4.0, 64).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let ious: Vec<f64> = (0..2000).map(|i| (i % 97) as f64 / 96.0).collect();
    c.bench_function("success_auc 2000 frames", |bench| {
        bench.iter(|| success_auc(black_box(&ious)).unwrap())
    });
}

fn tracking(c: &mut Criterion) {
    let model = desk_model(0).unwrap();
    let tracker = Tracker::new(model);
    let seq = scene(1);
    let first = seq.frame(0).unwrap();
    let next = seq.frame(1).unwrap();
    let box0 = seq.first_box().unwrap();
    c.bench_function("tracker init (one fusion)", |bench| {
        bench.iter(|| tracker.init(&first, &box0, &seq.text).unwrap())
    });
    let state = tracker.init(&first, &box0, &seq.text).unwrap();
    c.bench_function("tracker step", |bench| {
        bench.iter(|| {
            let mut s = state.clone();
            tracker.track(&mut s, black_box(&next)).unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let model = desk_model(0).unwrap();
    let data = TrainSet::new(synthetic_sequences(8, 0, &Default::default()), &cfg).unwrap();
    let tc = TrainConfig::desk();
    let mut trainer = Trainer::new(&model, &data, &tc).unwrap();
    let mut step = 0;
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("optimizer step, batch 16", |bench| {
        bench.iter(|| {
            step += 1;
            trainer.step(step).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, geometry, metrics, tracking, training);
criterion_main!(benches);
