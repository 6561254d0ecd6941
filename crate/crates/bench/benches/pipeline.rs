//! Hot-path timings: convolution, attention grounding, denoiser passes,
//! ancestral sampling, training steps, and the fidelity metric.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use emodiff_core::adapters::Route;
use emodiff_core::autodiff::{Tape, Tensor};
use emodiff_core::params::ParamBindings;
use emodiff_core::clients::TemplateCaptioner;
use emodiff_core::conditioning::null_condition;
use emodiff_core::corpus::{caption_corpus, CaptionPrompt, CorpusManifest, RetryPolicy};
use emodiff_core::diffusion::NoiseSchedule;
use emodiff_core::eval::frechet_gaussian_distance;
use emodiff_core::inference::sample_latent;
use emodiff_core::synth;
use emodiff_core::training::{
    prepare_training_set, train_step, ModelShape, OptimizerState, PipelineModel, TrainConfig,
    TrainSet,
};
use emodiff_core::util::rng_for;
use emodiff_core::EmotionLabel;

/// Test-profile model: the same widths the default config trains.
fn shape() -> ModelShape {
    ModelShape::default()
}

fn built() -> PipelineModel {
    shape().build().expect("model builds")
}

/// Small captioned corpus wired through the real preparation path.
fn train_world() -> (PipelineModel, TrainSet) {
    let (manifest, store) = synth::build_corpus(2, 11);
    let captioned = caption_corpus(
        &manifest.records,
        &store,
        &TemplateCaptioner,
        &CaptionPrompt::default(),
        RetryPolicy::default(),
    )
    .expect("captions");
    let manifest = CorpusManifest::new(captioned);
    let model = built();
    let set = prepare_training_set(&manifest, &store, &model.encoders).expect("train set");
    (model, set)
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = rng_for(3, "bench/conv", 0);
    let x = Tensor::randn(vec![16, 32, 32], 1.0, &mut rng);
    let w = Tensor::randn(vec![32, 16, 3, 3], 0.05, &mut rng);
    let b = Tensor::zeros(vec![32]);
    c.bench_function("conv2d_3x3_16to32_at_32px", |bch| {
        bch.iter(|| {
            let mut tape = Tape::inference();
            let xv = tape.constant(black_box(x.clone()));
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv2d(xv, wv, bv, 1, 1);
            black_box(tape.value(y).data[0])
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    let model = built();
    let mut rng = rng_for(5, "bench/attn", 0);
    let descriptor = Tensor::randn(vec![1, 64], 1.0, &mut rng);
    let tokens = Tensor::randn(vec![16, 64], 1.0, &mut rng);
    c.bench_function("visual_attention_16_tokens", |bch| {
        bch.iter(|| {
            let mut tape = Tape::inference();
            let mut binds = ParamBindings::new();
            let d = tape.constant(black_box(descriptor.clone()));
            let v = tape.constant(tokens.clone());
            let out = model.attention.forward(&mut tape, &mut binds, d, v, false);
            black_box(tape.value(out).data[0])
        })
    });
}

fn bench_denoiser_predict(c: &mut Criterion) {
    let model = built();
    let mut rng = rng_for(7, "bench/predict", 0);
    let z = Tensor::randn(vec![3, 32, 32], 1.0, &mut rng);
    let cond = Tensor::randn(vec![3, 64], 1.0, &mut rng);
    let route = Route::new(EmotionLabel::Awe);
    c.bench_function("denoiser_predict_base", |bch| {
        bch.iter(|| {
            black_box(
                model
                    .denoiser
                    .predict(black_box(&z), 25, &cond, None)
                    .expect("prediction"),
            )
        })
    });
    c.bench_function("denoiser_predict_routed", |bch| {
        bch.iter(|| {
            black_box(
                model
                    .denoiser
                    .predict(black_box(&z), 25, &cond, Some((&model.adapters, route)))
                    .expect("prediction"),
            )
        })
    });
}

fn bench_sampler(c: &mut Criterion) {
    let model = built();
    let schedule = NoiseSchedule::default_linear(10).expect("schedule");
    let mut rng = rng_for(9, "bench/sample", 0);
    let cond = Tensor::randn(vec![3, 64], 1.0, &mut rng);
    let (null_cond, _) = null_condition(&model.encoders.text).expect("null condition");
    let route = Route::new(EmotionLabel::Fear);
    c.bench_function("sample_latent_10_steps", |bch| {
        bch.iter(|| {
            black_box(
                sample_latent(
                    &model.denoiser,
                    &schedule,
                    black_box(&cond),
                    &null_cond,
                    1.0,
                    Some((&model.adapters, route)),
                    42,
                )
                .expect("sample"),
            )
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (mut model, set) = train_world();
    let schedule = NoiseSchedule::default_linear(50).expect("schedule");
    let cfg = TrainConfig::default();
    let mut optimizer = OptimizerState::new();
    let items: Vec<_> = set
        .items()
        .iter()
        .filter(|i| i.label == EmotionLabel::Fear)
        .collect();
    let mut iteration = 0;
    c.bench_function("train_step_single_item", |bch| {
        bch.iter(|| {
            let report = train_step(
                &mut model,
                &mut optimizer,
                &schedule,
                &cfg,
                &items[..1],
                iteration,
            )
            .expect("step");
            iteration += 1;
            black_box(report.total)
        })
    });
}

fn bench_frechet(c: &mut Criterion) {
    let mut rng = rng_for(13, "bench/frechet", 0);
    let a: Vec<Vec<f64>> = (0..128)
        .map(|_| Tensor::randn(vec![64], 1.0, &mut rng).data)
        .collect();
    let b: Vec<Vec<f64>> = (0..128)
        .map(|_| Tensor::randn(vec![64], 1.0, &mut rng).data)
        .collect();
    c.bench_function("frechet_64d_128_samples", |bch| {
        bch.iter(|| black_box(frechet_gaussian_distance(black_box(&a), &b).expect("distance")))
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_attention,
    bench_denoiser_predict,
    bench_sampler,
    bench_train_step,
    bench_frechet
);
criterion_main!(benches);
