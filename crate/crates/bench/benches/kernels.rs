use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embedkit::data::{make_synthetic_suite, SynthSizes};
use embedkit::kernels::gemm;
use embedkit::metrics::spearman;
use embedkit::objectives::DEFAULT_TEMPERATURE;
use embedkit::train::{train_simcse, TrainConfig};
use embedkit::{EncoderConfig, EncoderModel, Pooling, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("gemm");
    for n in [64, 256] {
        let a: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), true, &mut out, 0.0))
        });
    }
    group.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let suite = make_synthetic_suite(1, &SynthSizes { corpus: 2000, ..Default::default() }).unwrap();
    let vocab = Vocab::train(&suite.corpus, 1000, 2, true).unwrap();
    let config = EncoderConfig { max_len: 32, ..EncoderConfig::desk(vocab.len()) };
    let model = EncoderModel::init(config, 2).unwrap();
    let texts = &suite.corpus[..64];
    c.bench_function("encoder forward, 64 sentences", |b| {
        b.iter(|| model.embed_sentences(&vocab, Pooling::Mean, black_box(texts), true).unwrap())
    });
    c.bench_function("simcse step, batch 64", |b| {
        let cfg = TrainConfig { steps: 1, lr: 1e-4, batch_size: 64, ..Default::default() };
        b.iter_batched(
            || model.clone(),
            |mut m| train_simcse(&mut m, &vocab, &suite.corpus, &cfg, DEFAULT_TEMPERATURE, Pooling::Cls).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_spearman(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
    c.bench_function("spearman, 10k pairs", |b| b.iter(|| spearman(black_box(&x), black_box(&y)).unwrap()));
}

criterion_group!(benches, bench_gemm, bench_encoder, bench_spearman);
criterion_main!(benches);
