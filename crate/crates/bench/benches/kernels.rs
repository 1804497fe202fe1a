use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use moelab::data::BOS;
use moelab::model::{all_params, ForwardOptions, LanguageModel, ModelConfig};
use moelab::moe::{moe_forward, MoeLayer, Routing};
use moelab::nn::{bind, normal};
use moelab::rng::{stream, Stream};
use moelab::{Graph, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = stream(0, Stream::Init);
    let a = normal(&mut rng, &[256, 64], 1.0);
    let b = normal(&mut rng, &[64, 128], 1.0);
    c.bench_function("matmul 256x64x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
            black_box(g.matmul(va, vb).unwrap());
        })
    });
}

fn moe_layer(c: &mut Criterion) {
    let mut rng = stream(1, Stream::Init);
    let layer = MoeLayer::init(&mut rng, 64, 128, 8, 0.02);
    let x: Tensor = normal(&mut rng, &[128, 64], 1.0);
    for (label, all) in [("moe_forward top-2 of 8", false), ("moe_forward all 8", true)] {
        c.bench_function(label, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let lv = bind(&layer, &mut g, &|_| false);
                let xv = g.constant(x.clone());
                let mut routing = if all { Routing::All } else { Routing::TopK(2) };
                black_box(moe_forward(&mut g, xv, &lv, &mut routing, None, (0, 0)).unwrap().out);
            })
        });
    }
}

fn model_step(c: &mut Criterion) {
    let mut cfg = ModelConfig::desk_teacher();
    cfg.max_seq_len = 32;
    let model = LanguageModel::new(cfg, &mut stream(2, Stream::Init)).unwrap();
    let batch: Vec<Vec<usize>> = (0..16)
        .map(|i| std::iter::once(BOS).chain((0..23).map(|t| (i * 7 + t) % 256)).collect())
        .collect();
    let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().copied().chain([0])).collect();
    let mask = vec![true; targets.len()];
    c.bench_function("desk teacher forward+backward, 16x24 tokens", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let out = model
                .forward(
                    &mut g,
                    &batch,
                    ForwardOptions {
                        routing: &mut Routing::TopK(2),
                        noise: None,
                        trainable: &all_params,
                        collect_gates: false,
                    },
                )
                .unwrap();
            let loss = g.cross_entropy(out.logits, &targets, &mask).unwrap();
            g.backward(loss).unwrap();
            black_box(g.len());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, moe_layer, model_step
}
criterion_main!(benches);
