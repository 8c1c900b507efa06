use cerse_bench::{magnitudes, noise_waveform, random_text};
use cerse_core::nets::{CerEstimator, CerEstimatorConfig, SeModel, SeModelConfig};
use cerse_core::{cer, istft, normalize_full, stft, StftConfig, Transcript};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_stft(c: &mut Criterion) {
    let cfg = StftConfig::default();
    let w = noise_waveform(1.0, 1);
    c.bench_function("stft_1s", |b| b.iter(|| stft(black_box(&w), &cfg).unwrap()));
    let spec = stft(&w, &cfg).unwrap();
    c.bench_function("istft_1s", |b| {
        b.iter(|| istft(black_box(&spec), &cfg, 16_000).unwrap())
    });
    let x = spec.magnitude();
    c.bench_function("normalize_full_1s", |b| {
        b.iter(|| normalize_full(black_box(&x)).unwrap())
    });
}

fn bench_cer(c: &mut Criterion) {
    let mut group = c.benchmark_group("cer");
    for len in [10usize, 100, 1000] {
        let hyp = Transcript::new(&random_text(len, 1));
        let reference = Transcript::new(&random_text(len, 2));
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| cer(black_box(&hyp), black_box(&reference)).unwrap())
        });
    }
    group.finish();
}

fn bench_networks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = magnitudes(63, 3);
    let s = magnitudes(63, 4);
    let (x_bar, _) = normalize_full(&x).unwrap();

    let mut group = c.benchmark_group("se_forward_63_frames");
    for (name, cfg) in [("desk", SeModelConfig::desk()), ("full", SeModelConfig::default())] {
        let se = SeModel::new(cfg, &mut rng).unwrap();
        group.bench_function(name, |b| b.iter(|| se.forward(black_box(&x_bar)).unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("estimator_forward_63_frames");
    group.sample_size(10);
    for (name, cfg) in [
        ("desk", CerEstimatorConfig::desk()),
        ("full", CerEstimatorConfig::default()),
    ] {
        let est = CerEstimator::new(cfg, &mut rng).unwrap();
        group.bench_function(name, |b| b.iter(|| est.predict(black_box(&x), black_box(&s)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_stft, bench_cer, bench_networks);
criterion_main!(benches);
