use criterion::{criterion_group, criterion_main, Criterion};
use fastsal::network::{fold_batch_norm, init_weights, vgg16_reference};
use fastsal::trainer::{synthetic_samples, train_step, Sgd, TrainConfig};
use fastsal::{ModelConfig, Variant};
use fastsal_bench::{folded_model, random_tensor, INPUT};
use std::hint::black_box;

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_192x256");
    g.sample_size(20);
    let x = random_tensor(INPUT, 7);
    for variant in [Variant::Concat, Variant::Add] {
        let (graph, weights) = folded_model(variant, 1.0, INPUT);
        g.bench_function(format!("fastsal_{variant}"), |b| b.iter(|| graph.forward(&weights, &[black_box(&x)]).unwrap()));
    }
    let vgg = vgg16_reference().unwrap();
    let (vgg, vw) = fold_batch_norm(&vgg, &init_weights(&vgg, 0)).unwrap();
    g.sample_size(10);
    g.bench_function("vgg16_reference", |b| b.iter(|| vgg.forward(&vw, &[black_box(&x)]).unwrap()));
    g.finish();
}

fn training(c: &mut Criterion) {
    let graph = ModelConfig::new(Variant::Concat).with_width(0.25).graph().unwrap();
    let samples = synthetic_samples(4, 48, 64, 0);
    let batch: Vec<_> = samples.iter().collect();
    let cfg = TrainConfig::default();
    let mut store = init_weights(&graph, 0);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    g.bench_function("toy_batch4_48x64", |b| {
        b.iter(|| train_step(&graph, &mut store, &mut sgd, &cfg, &batch, 1e-4).unwrap())
    });
    g.finish();
}

criterion_group!(benches, inference, training);
criterion_main!(benches);
