//! Parallel vs sequential throughput on the per-utterance batch operations:
//! F0 extraction, greedy decoding and corpus evaluation. `par_map` uses the
//! rayon pool when the `parallel` feature (default) is enabled; `seq_map` is
//! the plain sequential fallback both sides are compared against.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tonemdd::eval::{evaluate_utterance, EvalRecord};
use tonemdd::model::{Model, ModelConfig, PitchInput};
use tonemdd::signal::{estimate_f0, Waveform};
use tonemdd::util::{par_map, seq_map};

fn tones(n: usize) -> Vec<Waveform> {
    (0..n)
        .map(|i| {
            let freq = 150.0 + 17.0 * i as f64;
            let samples: Vec<f64> = (0..16000)
                .map(|k| 0.5 * (2.0 * std::f64::consts::PI * freq * k as f64 / 16000.0).sin())
                .collect();
            Waveform::new(samples, 16000).unwrap()
        })
        .collect()
}

fn bench_f0_extraction(c: &mut Criterion) {
    let batch = tones(16);
    let mut group = c.benchmark_group("f0_extraction_batch16");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            black_box(par_map(&batch, |w| {
                estimate_f0(w, 10, 40.0, 800.0).unwrap().f0_hz.len()
            }))
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            black_box(seq_map(&batch, |w| {
                estimate_f0(w, 10, 40.0, 800.0).unwrap().f0_hz.len()
            }))
        })
    });
    group.finish();
}

fn bench_greedy_decode(c: &mut Criterion) {
    let cfg = ModelConfig {
        d_acoustic: 48,
        d_enc: 64,
        d_joint: 48,
        d_pitch_embed: 32,
        d_decoder_embed: 32,
        fusion_dim: 64,
        vocab_size: 35,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<(tonemdd::autodiff::Tensor, PitchInput)> = (0..8)
        .map(|_| {
            let t10 = 101;
            let feats = tonemdd::autodiff::Tensor::from_fn(vec![t10, cfg.n_mels], |_| {
                rng.random_range(-1.0..1.0)
            });
            let t_pitch = 26;
            let pitch = PitchInput::Indices(
                (0..t_pitch).map(|_| rng.random_range(0..cfg.pitch_embed_vocab())).collect(),
            );
            (feats, pitch)
        })
        .collect();
    let mut group = c.benchmark_group("greedy_decode_batch8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            black_box(par_map(&batch, |(f, p)| model.greedy_decode(f, p).unwrap().len()))
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            black_box(seq_map(&batch, |(f, p)| model.greedy_decode(f, p).unwrap().len()))
        })
    });
    group.finish();
}

fn bench_evaluate_corpus(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<EvalRecord> = (0..256)
        .map(|i| {
            let len = rng.random_range(4..24);
            let symbols = |rng: &mut ChaCha8Rng| -> Vec<String> {
                (0..len).map(|_| format!("s{}", rng.random_range(0..40))).collect()
            };
            EvalRecord {
                utt_id: format!("u{i}"),
                canonical: symbols(&mut rng),
                annotated: symbols(&mut rng),
                predicted: symbols(&mut rng),
            }
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_corpus_256");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(par_map(&records, |r| evaluate_utterance(r).unwrap().counts)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(seq_map(&records, |r| evaluate_utterance(r).unwrap().counts)))
    });
    group.finish();
}

criterion_group!(benches, bench_f0_extraction, bench_greedy_decode, bench_evaluate_corpus);
criterion_main!(benches);
