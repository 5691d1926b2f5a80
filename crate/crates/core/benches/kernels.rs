//! Hot kernels with the data-parallel path on and off.
//!
//! `parallel` toggles `volcodec::par` at runtime; building with
//! `--no-default-features` removes rayon altogether, and then both rows
//! measure the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volcodec::analytics::{hd95, LabelVolume};
use volcodec::codec::{decode_volume, encode_volume, DecodeMode};
use volcodec::entropy::{build_cdf, rc_decode, rc_encode, CdfTable};
use volcodec::nn::{gemm, Graph, Tensor};
use volcodec::par;
use volcodec::synth::phantom;
use volcodec::training::{TrainConfig, Trainer};
use volcodec::transforms::{Model, ModelConfig};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let (m, k, n) = (64, 800, 4096);
    let (a, b) = (random(m * k, 1), random(k * n, 2));
    let mut out = vec![0.0; m * n];
    let mut g = c.benchmark_group("gemm_64x800x4096");
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(name, |bench| bench.iter(|| gemm(m, k, n, black_box(&a), false, &b, false, &mut out, false)));
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::from_vec(&[32, 64, 64], random(32 * 64 * 64, 3)).unwrap();
    let w = Tensor::from_vec(&[32, 32, 5, 5], random(32 * 32 * 25, 4)).unwrap();
    let mut g = c.benchmark_group("conv5x5_32ch_64x64_fwd_bwd");
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let graph = Graph::new();
                let xv = graph.constant(x.clone());
                let wv = graph.param(w.clone());
                let y = graph.conv2d(xv, wv, None, 1, 2).unwrap();
                let loss = graph.sum(y);
                black_box(graph.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn bench_range_coder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let tables: Vec<CdfTable> = (0..n).map(|_| build_cdf(10f64.powf(rng.gen_range(-1.0..1.0)))).collect();
    let syms: Vec<i32> = (0..n).map(|_| rng.gen_range(-4..=4)).collect();
    let bytes = rc_encode(&syms, &tables).unwrap();
    let mut g = c.benchmark_group("range_coder_100k");
    g.bench_function("encode", |b| b.iter(|| rc_encode(black_box(&syms), &tables).unwrap()));
    g.bench_function("decode", |b| b.iter(|| rc_decode(black_box(&bytes), &tables).unwrap()));
    g.finish();
}

fn bench_codec(c: &mut Criterion) {
    let model = Model::init(ModelConfig::desk(), 1).unwrap();
    let v = phantom(64, 64, 16, 2).volume;
    let coded = encode_volume(&model, &v, 4).unwrap();
    let mut g = c.benchmark_group("codec_64x64x16_gop4");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_with_input(BenchmarkId::new("encode", name), &v, |b, v| b.iter(|| encode_volume(&model, v, 4).unwrap()));
        g.bench_with_input(BenchmarkId::new("decode", name), &coded.container, |b, cont| {
            b.iter(|| decode_volume(&model, cont, DecodeMode::Pixels).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let v = phantom(64, 64, 16, 3).volume;
    let cfg = TrainConfig { batch: 2, gop_stride: 4, crop: 32, steps_per_epoch: Some(1), ..TrainConfig::smoke() };
    let mut g = c.benchmark_group("train_step_desk_2x4x32x32");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_enabled(on);
        let mut t = Trainer::new(cfg.clone(), None, &[v.clone()]).unwrap();
        g.bench_function(name, |b| b.iter(|| t.step().unwrap()));
    }
    g.finish();
}

fn bench_hd95(c: &mut Criterion) {
    let ph = phantom(96, 96, 24, 4);
    let shifted: Vec<u8> = (0..ph.labels.labels().len())
        .map(|i| if i % 96 == 0 { 0 } else { ph.labels.labels()[i - 1] })
        .collect();
    let pred = LabelVolume::new(96, 96, 24, ph.labels.classes(), shifted).unwrap();
    let mut g = c.benchmark_group("hd95_96x96x24");
    for (name, on) in MODES {
        par::set_enabled(on);
        g.bench_function(name, |b| b.iter(|| hd95(black_box(&pred), &ph.labels, 1, [2.0, 1.0, 1.0]).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_range_coder, bench_codec, bench_train_step, bench_hd95);
criterion_main!(benches);
