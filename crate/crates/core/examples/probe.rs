//! Scratch calibration probe for the end-to-end experiment. Not part of the
//! test suite; run with:
//!   cargo run -p emodiff-core --release --example probe -- <per_class> <iters> <gen_per_class> [lr] [scaling] [guidance] [base_iters]

use std::collections::BTreeMap;
use std::time::Instant;

use emodiff_core::clients::{ClassifierClient, ProjectionEncoder, TemplateCaptioner};
use emodiff_core::corpus::{
    caption_corpus, filter_bottom_fraction, score_pairs, CaptionPrompt, CorpusManifest,
    RetryPolicy,
};
use emodiff_core::diffusion::decode_latent;
use emodiff_core::eval::emo_accuracy;
use emodiff_core::inference::{fit_clusters, Generator};
use emodiff_core::synth;
use emodiff_core::training::{
    prepare_training_set, pretrain_or_load_base, train, BaseTrainConfig, ModelShape,
    OptimizerState, TrainConfig,
};
use emodiff_core::util::derive_seed;
use emodiff_core::EmotionLabel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let per_class: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(40);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);
    let gen_per_class: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let scaling: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let guidance: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let base_iters: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(400);
    let sem_weight: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    println!("config: per_class={per_class} iters={iters} gen={gen_per_class} lr={lr} scaling={scaling} guidance={guidance} base_iters={base_iters} sem_weight={sem_weight}");

    let t0 = Instant::now();
    let (manifest, store) = synth::build_corpus(per_class, 0);
    let captioned = caption_corpus(
        &manifest.records,
        &store,
        &TemplateCaptioner,
        &CaptionPrompt::default(),
        RetryPolicy::default(),
    )
    .unwrap();
    let encoder = ProjectionEncoder::new(64, derive_seed(0, "curation-encoder", 0));
    let scored = score_pairs(&captioned, &store, &encoder, RetryPolicy::default()).unwrap();
    let (kept, _) = filter_bottom_fraction(&CorpusManifest::new(scored), 0.2).unwrap();
    println!("[{:?}] curated {} records", t0.elapsed(), kept.records.len());

    let mut shape = ModelShape::default();
    shape.adapter_scaling = scaling;
    let mut model = shape.build().unwrap();
    let set = prepare_training_set(&kept, &store, &model.encoders).unwrap();
    println!("[{:?}] prepared {}", t0.elapsed(), set.len());

    let base_cfg = BaseTrainConfig {
        iterations: base_iters,
        ..BaseTrainConfig::default()
    };
    let (null_tokens, _) =
        emodiff_core::conditioning::null_condition(&model.encoders.text).unwrap();
    let base = pretrain_or_load_base(
        std::path::Path::new("/tmp/probe-cache"),
        &shape,
        &base_cfg,
        &set,
        &null_tokens,
        &kept.content_hash(),
        &mut |i, l| {
            if (i + 1) % 100 == 0 {
                println!("base iter={i} loss={l:.4}");
            }
        },
    )
    .unwrap();
    model.denoiser = base;
    println!("[{:?}] base ready", t0.elapsed());

    let mut ablation = model.clone();

    let mut cfg = TrainConfig {
        iterations: iters,
        ..TrainConfig::default()
    };
    cfg.optimizer.learning_rate = lr;

    let judge = synth::train_classifier(24, derive_seed(0, "probe-judge", 0), 300);
    {
        let mut images = Vec::new();
        let mut intended = Vec::new();
        for label in EmotionLabel::ALL {
            for item in set.items().iter().filter(|i| i.label == label).take(8) {
                images.push(decode_latent(&item.latent).unwrap());
                intended.push(label);
            }
        }
        let ceiling = emo_accuracy(&images, &intended, &judge).unwrap();
        println!("judge accuracy on real corpus images = {ceiling:.4}");
    }
    let clusters = fit_clusters(&set).unwrap();

    for (name, m, sem_weight) in [
        ("full", &mut model, sem_weight),
        ("ablation", &mut ablation, 0.0),
    ] {
        let mut c = cfg.clone();
        c.sem_loss_weight = sem_weight;
        let mut opt = OptimizerState::new();
        let reports = train(m, &mut opt, &set, &c, 0, &mut |r| {
            if (r.iteration + 1) % 200 == 0 {
                println!("{name} {}", r.log_line());
            }
        })
        .unwrap();
        let last = reports.last().unwrap();
        println!("[{:?}] {name} trained, final total={:.4}", t0.elapsed(), last.total);

        let generator = Generator::new(m, &clusters, 50, guidance).unwrap();
        let mut images = Vec::new();
        let mut intended = Vec::new();
        let mut per_emotion: BTreeMap<EmotionLabel, (usize, usize)> = BTreeMap::new();
        for label in EmotionLabel::ALL {
            let batch = generator.generate(label, gen_per_class, 7).unwrap();
            let mut rgb = [0.0f64; 3];
            for g in &batch {
                let img = decode_latent(&g.latent).unwrap();
                let m = emodiff_core::clients::mean_rgb(&img);
                for c in 0..3 {
                    rgb[c] += m[c] / batch.len() as f64;
                }
                images.push(img);
                intended.push(label);
            }
            let corpus_rgb = {
                let mut acc = [0.0f64; 3];
                let mut n = 0;
                for item in set.items().iter().filter(|i| i.label == label).take(8) {
                    let img = decode_latent(&item.latent).unwrap();
                    let m = emodiff_core::clients::mean_rgb(&img);
                    for c in 0..3 {
                        acc[c] += m[c];
                    }
                    n += 1;
                }
                acc.map(|x| x / n as f64)
            };
            println!(
                "  {name} {label}: gen rgb ({:.3},{:.3},{:.3}) corpus rgb ({:.3},{:.3},{:.3})",
                rgb[0], rgb[1], rgb[2], corpus_rgb[0], corpus_rgb[1], corpus_rgb[2]
            );
        }
        let acc = emo_accuracy(&images, &intended, &judge).unwrap();
        for (i, img) in images.iter().enumerate() {
            let probs = judge.classify(img).unwrap();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let e = per_emotion.entry(intended[i]).or_insert((0, 0));
            e.1 += 1;
            if pred == intended[i].id() {
                e.0 += 1;
            }
        }
        println!("[{:?}] {name} Emo-A = {acc:.4}", t0.elapsed());
        for (label, (hit, n)) in &per_emotion {
            println!("  {label}: {hit}/{n}");
        }

        // Reconstruction-style check: condition on a real image's visual
        // tokens instead of a cluster draw. Separates "cluster draws are
        // off-manifold" from "the conditioning path itself lost steering".
        let schedule = emodiff_core::diffusion::NoiseSchedule::default_linear(50).unwrap();
        for label in EmotionLabel::ALL {
            let item = set.items().iter().find(|i| i.label == label).unwrap();
            let cond = cond_from_tokens(m, label, &item.visual_tokens);
            let mut rgb = [0.0f64; 3];
            let n = 4;
            for k in 0..n {
                let z = emodiff_core::inference::sample_latent(
                    &m.denoiser,
                    &schedule,
                    &cond,
                    &null_tokens,
                    guidance,
                    Some((&m.adapters, emodiff_core::adapters::Route::new(label))),
                    emodiff_core::inference::image_seed(9000 + label.id() as u64, k),
                )
                .unwrap();
                let img = decode_latent(&z).unwrap();
                let mrgb = emodiff_core::clients::mean_rgb(&img);
                for c in 0..3 {
                    rgb[c] += mrgb[c] / n as f64;
                }
            }
            println!(
                "  {name} {label} recon rgb ({:.3},{:.3},{:.3})",
                rgb[0], rgb[1], rgb[2]
            );
        }
    }
}

fn cond_from_tokens(
    model: &emodiff_core::training::PipelineModel,
    label: EmotionLabel,
    v_tokens: &emodiff_core::autodiff::Tensor,
) -> emodiff_core::autodiff::Tensor {
    use emodiff_core::autodiff::{Tape, Tensor};
    use emodiff_core::encoders::{BOS_ID, EOS_ID};
    use emodiff_core::params::ParamBindings;
    let descriptor = model.mapper.descriptor(label);
    let mut tape = Tape::inference();
    let mut binds = ParamBindings::new();
    let d = tape.constant(descriptor);
    let v = tape.constant(v_tokens.clone());
    let p = model.attention.forward(&mut tape, &mut binds, d, v, false);
    let pseudo = tape.value(p).clone();
    let text = &model.encoders.text;
    let dim = text.dim();
    let mut rows = text.embedding_rows(&[BOS_ID]).data;
    rows.extend_from_slice(&pseudo.data);
    rows.extend_from_slice(&text.embedding_rows(&[EOS_ID]).data);
    let mut tape = Tape::inference();
    let mut binds = ParamBindings::new();
    let rv = tape.constant(Tensor::new(vec![3, dim], rows));
    let enc = text.encode_rows(&mut tape, &mut binds, rv).unwrap();
    tape.value(enc.hidden).clone()
}
