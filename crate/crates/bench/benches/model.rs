use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dirl_core::attention::aggregate_attention;
use dirl_core::ssl::{make_views, train_step, DirlConfig, TrainState, Variant};
use dirl_core::synth::{generate_crop, SynthConfig};
use dirl_core::tensor::matmul;
use dirl_core::{Encoder, EncoderConfig, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
}

fn tensor_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&[16, 32], &mut rng);
    let b = random(&[32, 128], &mut rng);
    c.bench_function("matmul 16x32x128", |bn| bn.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
}

fn encode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut set = ParamSet::new();
    let enc = Encoder::init(&mut set, &EncoderConfig::default(), &mut rng).unwrap();
    let (img, _) = generate_crop(&SynthConfig::default(), 1, &mut rng).unwrap();
    c.bench_function("encode 32x32 crop", |bn| bn.iter(|| enc.encode(&set, black_box(&img)).unwrap()));
    let (_, rec) = enc.encode(&set, &img).unwrap();
    c.bench_function("aggregate attention", |bn| bn.iter(|| aggregate_attention(black_box(&rec), 2).unwrap()));
}

fn training(c: &mut Criterion) {
    let cfg = DirlConfig::default();
    let sc = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("train step, batch 8");
    group.sample_size(10);
    for variant in [Variant::Baseline, Variant::Dirl] {
        let state = TrainState::new(&cfg, variant, false, 0).unwrap();
        let batch: Vec<_> = (0..8)
            .map(|i| {
                let (img, cm) = generate_crop(&sc, i % 2, &mut rng).unwrap();
                state.prepare(&make_views(&img, &cm, &cfg.aug, &mut rng).unwrap()).unwrap()
            })
            .collect();
        group.bench_function(variant.to_string(), |bn| {
            bn.iter_batched(
                || state.clone(),
                |mut s| train_step(&mut s, &batch, 5e-5, 0.996).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, tensor_ops, encode, training);
criterion_main!(benches);
