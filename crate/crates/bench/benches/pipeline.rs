use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use mvgd_bench::{tiny_samples, ModelConfig, MvgdNet, OptimConfig, Trainer, Variant};
use mvgd_core::eval::metrics;
use mvgd_core::flow::{compute_flow_frames, BlockMatching};

fn forward(c: &mut Criterion) {
    let sample = tiny_samples(1, 0).remove(0);
    let mut group = c.benchmark_group("forward_clip");
    for v in [Variant::A, Variant::G] {
        let net = MvgdNet::new(ModelConfig::tiny().with_variant(v), 0).unwrap();
        group.bench_function(format!("{v:?}"), |b| {
            b.iter(|| {
                net.forward_clip_with_flows(black_box(&sample.clip), sample.flows.as_ref())
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let samples = tiny_samples(1, 0);
    let net = MvgdNet::new(ModelConfig::tiny(), 0).unwrap();
    let trainer = Trainer::new(net, OptimConfig::default()).unwrap();
    c.bench_function("train_step/G", |b| {
        b.iter_batched(
            || trainer.clone(),
            |mut t| t.train_step(&[&samples[0]]).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn flow_and_metrics(c: &mut Criterion) {
    let sample = tiny_samples(1, 0).remove(0);
    let f = &sample.clip.frames;
    c.bench_function("block_matching/64x64", |b| {
        b.iter(|| compute_flow_frames(black_box(&f[0]), &f[1], &BlockMatching::default()).unwrap())
    });
    let gts = sample.clip.gt_masks.clone().unwrap();
    c.bench_function("metrics/3x64x64", |b| {
        b.iter(|| metrics(black_box(&gts), &gts).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, train_step, flow_and_metrics
}
criterion_main!(benches);
