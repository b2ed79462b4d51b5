use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use semcolor_bench::{desk_corpus, tensor};
use semcolor_core::colorspace::QuantizedChroma;
use semcolor_core::conv::{conv2d_forward, ConvGeom};
use semcolor_core::data::batch_iter;
use semcolor_core::dmol::{dmol_nll, dmol_nll_with_grad, ChromaTargets, DmolConfig, DmolParams};
use semcolor_core::generator::{sample_image, SampleOptions};
use semcolor_core::training::{TrainConfig, Trainer};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (ch, side, dil) in [(16, 32, 1), (64, 32, 2), (64, 16, 1)] {
        let x = tensor(&[ch, 4, side, side], 1);
        let w = tensor(&[ch, ch, 3, 3], 2);
        let b = tensor(&[ch], 3);
        group.bench_with_input(BenchmarkId::from_parameter(format!("c{ch}_s{side}_d{dil}")), &(), |bench, _| {
            bench.iter(|| conv2d_forward(black_box(&x), &w, Some(&b), ConvGeom::same(3, dil)))
        });
    }
    group.finish();
}

fn dmol(c: &mut Criterion) {
    let cfg = DmolConfig {
        components: 10,
        bins: 32,
        log_scale_min: -7.0,
    };
    let side = 16;
    let params = DmolParams::new(10, tensor(&[60, 4, side, side], 4)).unwrap();
    let chroma: Vec<QuantizedChroma> = (0..4)
        .map(|k| {
            let idx = |o: usize| (0..side * side).map(|i| ((i * 7 + k * 3 + o) % 32) as u16).collect();
            QuantizedChroma::new(side, side, 32, idx(0), idx(11)).unwrap()
        })
        .collect();
    let targets = ChromaTargets::from_quantized(&chroma.iter().collect::<Vec<_>>()).unwrap();
    c.bench_function("dmol_nll_4x16x16", |b| b.iter(|| dmol_nll(black_box(&params), &targets, &cfg).unwrap()));
    c.bench_function("dmol_nll_grad_4x16x16", |b| {
        b.iter(|| dmol_nll_with_grad(black_box(&params), &targets, &cfg).unwrap())
    });
}

fn training_and_sampling(c: &mut Criterion) {
    let (cfg, data) = desk_corpus(8);
    let mut trainer = Trainer::<f32>::from_scratch(&cfg, TrainConfig::default()).unwrap();
    let batches = batch_iter(&data, 4, 0, 0).unwrap();
    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    group.bench_function("train_step_batch4", |b| b.iter(|| trainer.train_step(&batches[0]).unwrap()));
    let opts = SampleOptions { seed: 0, temperature: 1.0 };
    group.bench_function("sample_one_image", |b| {
        b.iter(|| sample_image(&trainer.model, &trainer.shadow, &data[0].gray, opts, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, dmol, training_and_sampling);
criterion_main!(benches);
