//! Bundled synthetic corpus: eight visually distinct classes keyed to the
//! emotion taxonomy, so the whole pipeline runs with zero external assets.
//!
//! Each class owns a hue band, a shape, and a texture level. Per-image
//! jitter keeps classes overlapping enough that a classifier below 100%
//! remains informative. A softmax classifier trained on held-out draws of
//! the same generator serves as the accuracy judge.

use crate::clients::{cell_mean_features, ClassifierClient};
use crate::corpus::{CorpusManifest, CorpusRecord, ImageStore, MemImageStore};
use crate::error::Result;
use crate::taxonomy::EmotionLabel;
use crate::util::rng_for;
use crate::EMOTION_COUNT;
use image::RgbImage;
use rand::Rng;
use std::path::Path;

/// Feature grid used by the held-out classifier.
pub const CLASSIFIER_GRID: u32 = 4;

const IMAGE_SIZE: u32 = 32;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((g + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((b + m) * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Class hue, centred on one of the eight 45-degree hue-word bands.
pub fn class_hue(label: EmotionLabel) -> f64 {
    label.id() as f64 * 45.0 + 22.5
}

fn in_shape(label: EmotionLabel, x: u32, y: u32) -> bool {
    let s = IMAGE_SIZE as f64;
    let (fx, fy) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
    match label.id() {
        // circle
        0 => fx * fx + fy * fy < 0.11,
        // triangle
        1 => fy > -0.3 && fy < 0.35 && fx.abs() < (fy + 0.3) * 0.55,
        // horizontal bands
        2 => (y / 6) % 2 == 0,
        // radial rays
        3 => ((fy.atan2(fx) * 4.0 / std::f64::consts::PI).floor() as i64).rem_euclid(2) == 0,
        // checkerboard
        4 => ((x / 8) + (y / 8)) % 2 == 0,
        // rings
        5 => ((fx * fx + fy * fy).sqrt() * 10.0) as u32 % 2 == 0,
        // diagonal stripes
        6 => ((x + y) / 6) % 2 == 0,
        // scattered dots
        _ => {
            let gx = (x % 8) as f64 - 3.5;
            let gy = (y % 8) as f64 - 3.5;
            gx * gx + gy * gy < 6.0
        }
    }
}

/// Renders the `index`-th image of a class under `stream`, a corpus-level
/// stream name separating, for example, training draws from held-out ones.
pub fn synth_image(label: EmotionLabel, index: u64, seed: u64, stream: &str) -> RgbImage {
    let tag = format!("{stream}/{}", label.name());
    let mut rng = rng_for(seed, &tag, index);
    let hue = class_hue(label) + rng.gen_range(-14.0..14.0);
    let sat = rng.gen_range(0.65..0.95);
    let val = rng.gen_range(0.5..0.85);
    let bg = hsv_to_rgb(hue + rng.gen_range(-8.0..8.0), sat * 0.55, val * 0.7);
    let fg = hsv_to_rgb(hue, sat, val);
    let noise_amp = 6.0 + 4.0 * (label.id() % 3) as f64;
    RgbImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
        let base = if in_shape(label, x, y) { fg } else { bg };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let n: f64 = rng.gen_range(-noise_amp..noise_amp);
            px[c] = (base[c] as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    })
}

/// In-memory corpus of `per_class` images per emotion. Records carry no
/// captions; the captioning stage fills them.
pub fn build_corpus(per_class: usize, seed: u64) -> (CorpusManifest, MemImageStore) {
    let mut store = MemImageStore::new();
    let mut records = Vec::with_capacity(per_class * EMOTION_COUNT);
    for label in EmotionLabel::ALL {
        for i in 0..per_class {
            let image_ref = format!("{}/{:04}.png", label.name(), i);
            store.insert(image_ref.clone(), synth_image(label, i as u64, seed, "corpus"));
            records.push(CorpusRecord::new(image_ref, label));
        }
    }
    (CorpusManifest::new(records), store)
}

/// Writes the same corpus to `dir/<emotion>/<n>.png` and returns its
/// manifest with refs relative to `dir`.
pub fn write_corpus(dir: &Path, per_class: usize, seed: u64) -> Result<CorpusManifest> {
    let (manifest, store) = build_corpus(per_class, seed);
    for record in &manifest.records {
        let path = dir.join(&record.image_ref);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        store.load(&record.image_ref)?.save(&path)?;
    }
    Ok(manifest)
}

/// Softmax regression over cell-mean colour features, trained on held-out
/// synthetic draws.
#[derive(Debug, Clone)]
pub struct SynthClassifier {
    // Row-major [EMOTION_COUNT, features + 1]; last column is the bias.
    weights: Vec<f64>,
    features: usize,
}

impl SynthClassifier {
    fn logits(&self, feats: &[f64]) -> [f64; EMOTION_COUNT] {
        let cols = self.features + 1;
        let mut out = [0.0; EMOTION_COUNT];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * cols..(k + 1) * cols];
            *o = row[self.features]
                + feats.iter().zip(row).map(|(f, w)| f * w).sum::<f64>();
        }
        out
    }
}

impl ClassifierClient for SynthClassifier {
    fn classify(&self, image: &RgbImage) -> Result<[f64; EMOTION_COUNT]> {
        let feats = cell_mean_features(image, CLASSIFIER_GRID);
        let mut logits = self.logits(&feats);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        Ok(logits)
    }
}

/// Trains the judge on `per_class` fresh draws per emotion from the
/// "holdout" stream, full-batch gradient descent on cross-entropy.
pub fn train_classifier(per_class: usize, seed: u64, epochs: usize) -> SynthClassifier {
    let features = (CLASSIFIER_GRID * CLASSIFIER_GRID * 3) as usize;
    let cols = features + 1;
    let mut data = Vec::with_capacity(per_class * EMOTION_COUNT);
    for label in EmotionLabel::ALL {
        for i in 0..per_class {
            let img = synth_image(label, i as u64, seed, "holdout");
            data.push((cell_mean_features(&img, CLASSIFIER_GRID), label.id()));
        }
    }
    let mut clf = SynthClassifier {
        weights: vec![0.0; EMOTION_COUNT * cols],
        features,
    };
    let lr = 0.5;
    let n = data.len() as f64;
    let mut grad = vec![0.0; EMOTION_COUNT * cols];
    for _ in 0..epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (feats, target) in &data {
            let mut p = clf.logits(feats);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in p.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            for (k, pk) in p.iter().enumerate() {
                let err = pk / sum - if k == *target { 1.0 } else { 0.0 };
                let row = &mut grad[k * cols..(k + 1) * cols];
                for (g, f) in row.iter_mut().zip(feats) {
                    *g += err * f;
                }
                row[features] += err;
            }
        }
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            *w -= lr * g / n;
        }
    }
    clf
}
