//! External-client contracts for captioning, embedding, and emotion
//! classification, plus deterministic built-in stubs.
//!
//! The real pipeline binds multimodal captioners and pretrained encoders
//! behind these traits; the stubs here are seeded and pure so the whole
//! pipeline runs offline and byte-reproducibly. The template captioner reads
//! simple colour/brightness statistics out of the image and echoes the
//! emotion prior it finds in the prompt, which is enough structure for the
//! caption-guidance path to be exercised end to end.

use crate::error::Result;
use crate::taxonomy::{EmotionLabel, EMOTION_COUNT};
use crate::util::rng_for;
use image::RgbImage;
use rand::Rng;

/// Produces a caption for an image given a rendered prompt.
pub trait CaptionerClient: Send + Sync {
    fn caption(&self, image: &RgbImage, prompt: &str) -> Result<String>;
}

/// Embeds images and texts into a shared space of dimension `dim()`.
///
/// Both embeddings are unit-norm so cosine similarity is a plain dot product.
pub trait EncoderClient: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Predicts a probability distribution over the eight emotions.
pub trait ClassifierClient: Send + Sync {
    fn classify(&self, image: &RgbImage) -> Result<[f64; EMOTION_COUNT]>;
}

/// Mean RGB per cell of a `grid`x`grid` partition, values in [0,1].
///
/// The shared feature extractor behind the stub clients and the synthetic
/// evaluation classifier.
pub fn cell_mean_features(image: &RgbImage, grid: u32) -> Vec<f64> {
    let (w, h) = image.dimensions();
    let mut feats = vec![0.0f64; (grid * grid * 3) as usize];
    let mut counts = vec![0u32; (grid * grid) as usize];
    for (x, y, px) in image.enumerate_pixels() {
        let cx = (x * grid / w.max(1)).min(grid - 1);
        let cy = (y * grid / h.max(1)).min(grid - 1);
        let cell = (cy * grid + cx) as usize;
        counts[cell] += 1;
        for c in 0..3 {
            feats[cell * 3 + c] += px.0[c] as f64 / 255.0;
        }
    }
    for cell in 0..(grid * grid) as usize {
        let n = counts[cell].max(1) as f64;
        for c in 0..3 {
            feats[cell * 3 + c] /= n;
        }
    }
    feats
}

/// Mean RGB of the whole image, values in [0,1].
pub fn mean_rgb(image: &RgbImage) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let n = (image.width() * image.height()).max(1) as f64;
    for px in image.pixels() {
        for c in 0..3 {
            sum[c] += px.0[c] as f64 / 255.0;
        }
    }
    [sum[0] / n, sum[1] / n, sum[2] / n]
}

/// Hue bucket name for a mean-RGB triple.
///
/// Eight buckets spanning the hue circle; greys fall back to a
/// brightness-based word.
pub fn hue_word(rgb: [f64; 3]) -> &'static str {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    let delta = max - min;
    if delta < 0.04 {
        return if max > 0.5 { "pale" } else { "grey" };
    }
    let hue = if max == rgb[0] {
        60.0 * (((rgb[1] - rgb[2]) / delta) % 6.0)
    } else if max == rgb[1] {
        60.0 * ((rgb[2] - rgb[0]) / delta + 2.0)
    } else {
        60.0 * ((rgb[0] - rgb[1]) / delta + 4.0)
    };
    let hue = if hue < 0.0 { hue + 360.0 } else { hue };
    const WORDS: [&str; 8] = [
        "crimson", "amber", "golden", "verdant", "teal", "azure", "indigo", "magenta",
    ];
    WORDS[((hue / 45.0) as usize).min(7)]
}

/// Deterministic template captioner.
///
/// Describes the image through its colour statistics and, when the prompt
/// carries an emotion prior, names that emotion, mirroring how a captioner
/// uses the prior it is given. Output depends only on (image, prompt).
#[derive(Debug, Clone, Default)]
pub struct TemplateCaptioner;

impl TemplateCaptioner {
    fn prompt_emotion(prompt: &str) -> Option<EmotionLabel> {
        let lower = prompt.to_ascii_lowercase();
        EmotionLabel::ALL
            .iter()
            .copied()
            .find(|l| lower.contains(l.name()))
    }
}

impl CaptionerClient for TemplateCaptioner {
    fn caption(&self, image: &RgbImage, prompt: &str) -> Result<String> {
        let rgb = mean_rgb(image);
        let brightness = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        let bright_word = if brightness > 0.55 {
            "bright"
        } else if brightness > 0.35 {
            "muted"
        } else {
            "dim"
        };
        let colour = hue_word(rgb);
        let cells = cell_mean_features(image, 2);
        let mut contrast = 0.0f64;
        for i in 0..4 {
            for c in 0..3 {
                contrast += (cells[i * 3 + c] - rgb[c]).abs();
            }
        }
        let texture = if contrast > 0.5 { "contrasting" } else { "even" };
        let one_sentence = prompt.to_ascii_lowercase().contains("one-sentence");
        let mut caption = format!("a {bright_word} {colour} scene with {texture} tones");
        if let Some(label) = Self::prompt_emotion(prompt) {
            caption.push_str(&format!(" evoking {}", label.name()));
        }
        if !one_sentence {
            caption.push_str(&format!(
                ". the lighting is {bright_word} and the palette leans {colour} across the frame, \
                 with {texture} regions from edge to edge"
            ));
        }
        Ok(caption)
    }
}

/// Seeded random-projection encoder.
///
/// Images project through cell-mean features, texts through a hashed
/// bag-of-tokens; both outputs are unit-norm. Stands in for a pretrained
/// joint embedding during offline curation runs.
#[derive(Debug, Clone)]
pub struct ProjectionEncoder {
    dim: usize,
    image_proj: Vec<f64>, // dim x IMG_FEATS
    text_proj: Vec<f64>,  // dim x TEXT_BUCKETS
}

const IMG_GRID: u32 = 4;
const IMG_FEATS: usize = (IMG_GRID * IMG_GRID * 3) as usize;
const TEXT_BUCKETS: usize = 256;

impl ProjectionEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "projection-encoder", 0);
        let scale = 1.0 / (IMG_FEATS as f64).sqrt();
        let image_proj = (0..dim * IMG_FEATS)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        let tscale = 1.0 / (TEXT_BUCKETS as f64).sqrt();
        let text_proj = (0..dim * TEXT_BUCKETS)
            .map(|_| rng.gen_range(-tscale..tscale))
            .collect();
        Self { dim, image_proj, text_proj }
    }

    fn normalize(mut v: Vec<f64>) -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

/// Stable token hash used by the projection encoder and the toy tokenizer
/// (FNV-1a, 64-bit).
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Lowercased alphanumeric tokens of a text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_ascii_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl EncoderClient for ProjectionEncoder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let feats = cell_mean_features(image, IMG_GRID);
        let mut out = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.image_proj[i * IMG_FEATS..(i + 1) * IMG_FEATS];
            *o = row.iter().zip(&feats).map(|(a, b)| a * b).sum();
        }
        Ok(Self::normalize(out))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut bag = vec![0.0f64; TEXT_BUCKETS];
        for tok in tokenize(text) {
            bag[(token_hash(&tok) % TEXT_BUCKETS as u64) as usize] += 1.0;
        }
        let mut out = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.text_proj[i * TEXT_BUCKETS..(i + 1) * TEXT_BUCKETS];
            *o = row.iter().zip(&bag).map(|(a, b)| a * b).sum();
        }
        Ok(Self::normalize(out))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Fixed-weight classifier stub: seeded projection of image features through
/// a softmax. Not accurate, just deterministic and well-formed.
#[derive(Debug, Clone)]
pub struct FixedWeightClassifier {
    weights: Vec<f64>, // EMOTION_COUNT x IMG_FEATS
}

impl FixedWeightClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "fixed-classifier", 0);
        let weights = (0..EMOTION_COUNT * IMG_FEATS)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Self { weights }
    }
}

impl ClassifierClient for FixedWeightClassifier {
    fn classify(&self, image: &RgbImage) -> Result<[f64; EMOTION_COUNT]> {
        let feats = cell_mean_features(image, IMG_GRID);
        let mut logits = [0.0f64; EMOTION_COUNT];
        for (k, logit) in logits.iter_mut().enumerate() {
            let row = &self.weights[k * IMG_FEATS..(k + 1) * IMG_FEATS];
            *logit = row.iter().zip(&feats).map(|(a, b)| a * b).sum();
        }
        Ok(softmax8(logits))
    }
}

pub(crate) fn softmax8(logits: [f64; EMOTION_COUNT]) -> [f64; EMOTION_COUNT] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; EMOTION_COUNT];
    let mut sum = 0.0;
    for (p, l) in probs.iter_mut().zip(logits.iter()) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    probs
}
