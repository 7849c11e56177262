use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use npuppet_bench::Fixture;
use npuppet_core::apps::{constrained_deform, DragSession};
use npuppet_core::energies::{arap_with_gradient, Constraint};
use npuppet_core::puppet::{cotangent_weights, locate_point};
use npuppet_core::render::{render, render_backward, RasterConfig};
use npuppet_core::train::{train, TrainConfig};
use npuppet_core::model::ModelConfig;

fn rendering(c: &mut Criterion) {
    let f = Fixture::new(1, 64);
    let state = &f.frames[0].state;
    let cfg = RasterConfig::new(64, 64).with_background([1.0; 4]);
    c.bench_function("render 64x64", |b| b.iter(|| render(black_box(state), &f.rig.puppet, &cfg).unwrap()));
    let upstream = vec![1.0; cfg.pixel_count() * 4];
    c.bench_function("render backward 64x64", |b| {
        b.iter(|| render_backward(black_box(state), &f.rig.puppet, &cfg, &upstream).unwrap())
    });
}

fn energies(c: &mut Criterion) {
    let f = Fixture::new(1, 64);
    let weights = cotangent_weights(&f.rig.puppet).unwrap();
    let rest = &f.rig.puppet.rest_vertices;
    let posed = &f.frames[0].state.vertices;
    c.bench_function("arap energy and gradient", |b| {
        b.iter(|| arap_with_gradient(rest, black_box(posed), &weights))
    });
}

fn network(c: &mut Criterion) {
    let f = Fixture::new(1, 64);
    let img = &f.frames[0].image;
    c.bench_function("encode and decode 64x64", |b| {
        b.iter(|| f.model.predict(black_box(img), &f.rig.puppet).unwrap())
    });
    let z = f.model.encode(img).unwrap();
    let s0 = f.model.decode(&z, &f.rig.puppet).unwrap();
    let point = locate_point(&f.rig.puppet, &s0, s0.vertices[0]).unwrap();
    let session = DragSession::new(z, vec![Constraint { point, target: [0.1, 0.1] }]);
    let cfg = RasterConfig::new(64, 64).with_background([1.0; 4]);
    c.bench_function("drag, 5 iterations", |b| {
        b.iter(|| constrained_deform(black_box(&session), &f.model, &f.rig.puppet, &cfg).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let f = Fixture::new(0, 32);
    let frames: Vec<_> = f.frames.iter().map(|s| s.image.clone()).collect();
    let cfg = TrainConfig {
        epochs: 1,
        resolution: [32, 32],
        model: ModelConfig::tiny(32, 32),
        ..Default::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("one epoch, 4 frames at 32x32", |b| {
        b.iter(|| train(black_box(&frames), &f.rig.puppet, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, rendering, energies, network, training);
criterion_main!(benches);
