//! Five-metric evaluation harness: emotion accuracy, semantic clarity,
//! semantic diversity, pairwise image diversity, and distribution fidelity.
//!
//! Every metric is permutation-invariant over image order and
//! bit-reproducible given the same seed. Parallel passes collect per-item
//! values in index order and reduce sequentially, so worker count never
//! changes a result.

use crate::clients::{ClassifierClient, EncoderClient};
use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::taxonomy::EmotionLabel;
use crate::util::{rng_for, sha256_hex};
use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

// ---- vocabulary ----

/// Union of the top `n` caption tokens per emotion, sorted and deduplicated.
pub fn concept_vocabulary(
    report: &BTreeMap<EmotionLabel, BTreeMap<String, usize>>,
    n: usize,
) -> Vec<String> {
    let mut vocab = BTreeSet::new();
    for counts in report.values() {
        let mut tokens: Vec<(&String, &usize)> = counts.iter().collect();
        tokens.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (token, _) in tokens.into_iter().take(n) {
            vocab.insert(token.clone());
        }
    }
    vocab.into_iter().collect()
}

/// Default vocabulary size per emotion.
pub const VOCABULARY_PER_EMOTION: usize = 20;

/// Convenience: vocabulary straight from a curated manifest.
pub fn manifest_vocabulary(manifest: &CorpusManifest, n: usize) -> Vec<String> {
    let stop = crate::corpus::default_stop_words();
    concept_vocabulary(&crate::corpus::token_frequency_report(manifest, &stop), n)
}

// ---- emotion accuracy ----

fn argmax8(probs: &[f64; crate::EMOTION_COUNT]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose classifier argmax matches the intended label.
pub fn emo_accuracy(
    images: &[RgbImage],
    intended: &[EmotionLabel],
    classifier: &dyn ClassifierClient,
) -> Result<f64> {
    if images.len() != intended.len() {
        return Err(Error::Eval(format!(
            "{} images but {} intended labels",
            images.len(),
            intended.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Eval("no images to score".into()));
    }
    let hits: Vec<bool> = images
        .par_iter()
        .zip(intended)
        .map(|(img, label)| {
            let probs = classifier.classify(img)?;
            Ok(argmax8(&probs) == label.id())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

// ---- semantic clarity ----

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over images of the best cosine match against a vocabulary, on raw
/// embedding vectors.
pub fn max_cosine_clarity(image_embs: &[Vec<f64>], vocab_embs: &[Vec<f64>]) -> Result<f64> {
    if vocab_embs.is_empty() {
        return Err(Error::Eval("empty concept vocabulary".into()));
    }
    if image_embs.is_empty() {
        return Err(Error::Eval("no image embeddings".into()));
    }
    let total: f64 = image_embs
        .iter()
        .map(|img| {
            vocab_embs
                .iter()
                .map(|v| cosine(img, v))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / image_embs.len() as f64)
}

/// Mean over images of max-over-vocabulary cosine similarity between the
/// image embedding and each concept's text embedding.
pub fn semantic_clarity(
    images: &[RgbImage],
    vocabulary: &[String],
    encoder: &dyn EncoderClient,
) -> Result<f64> {
    if vocabulary.is_empty() {
        return Err(Error::Eval("empty concept vocabulary".into()));
    }
    let vocab_embs: Vec<Vec<f64>> = vocabulary
        .par_iter()
        .map(|t| encoder.embed_text(t))
        .collect::<Result<_>>()?;
    let image_embs: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| encoder.embed_image(img))
        .collect::<Result<_>>()?;
    max_cosine_clarity(&image_embs, &vocab_embs)
}

// ---- semantic diversity ----

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise distance between seeded k-means centroids of one
/// embedding set. Data is sorted before initialization, so the result does
/// not depend on input order.
pub fn kmeans_centroid_spread(embs: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("cluster count must be at least 1".into()));
    }
    if embs.len() < k {
        return Err(Error::Eval(format!(
            "{} embeddings cannot fill {k} clusters",
            embs.len()
        )));
    }
    let mut data: Vec<&Vec<f64>> = embs.iter().collect();
    data.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    // k-means++ seeding, then Lloyd iterations to a fixed point.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(data[rng.gen_range(0..data.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| {
                centroids
                    .iter()
                    .map(|c| {
                        let d = euclidean(x, c);
                        d * d
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total == 0.0 {
            // All points coincide with existing centroids.
            data[rng.gen_range(0..data.len())].clone()
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            data[pick].clone()
        };
        centroids.push(next);
    }

    let dim = data[0].len();
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = euclidean(x, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, cent) in centroids.iter_mut().enumerate() {
            let members: Vec<&&Vec<f64>> =
                data.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(x, _)| x).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for m in &members {
                for (s, x) in mean.iter_mut().zip(m.iter()) {
                    *s += x;
                }
            }
            for s in &mut mean {
                *s /= members.len() as f64;
            }
            *cent = mean;
        }
    }

    if k == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            total += euclidean(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Sem-D: per-emotion centroid spread under seeded k-means, averaged over
/// emotions. Each emotion draws its own named random stream.
pub fn semantic_diversity(
    images_per_emotion: &BTreeMap<EmotionLabel, Vec<RgbImage>>,
    encoder: &dyn EncoderClient,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if images_per_emotion.is_empty() {
        return Err(Error::Eval("no emotions to evaluate".into()));
    }
    let mut total = 0.0;
    for (label, images) in images_per_emotion {
        let embs: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| encoder.embed_image(img))
            .collect::<Result<_>>()?;
        let mut rng = rng_for(seed, "semd", label.id() as u64);
        total += kmeans_centroid_spread(&embs, k, &mut rng).map_err(|e| {
            Error::Eval(format!("emotion '{label}': {e}"))
        })?;
    }
    Ok(total / images_per_emotion.len() as f64)
}

// ---- pairwise diversity ----

/// Normalized pixel-space distance: mean absolute channel difference over
/// 255. Identical images score 0; black vs white scores the maximum, 1.
pub fn pixel_distance(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Eval(format!(
            "image dimensions {:?} vs {:?} differ",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let total: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(total / (a.as_raw().len() as f64 * 255.0))
}

/// Mean distance over all unordered image pairs under a pluggable
/// distance function.
pub fn pairwise_diversity<F>(images: &[RgbImage], distance: F) -> Result<f64>
where
    F: Fn(&RgbImage, &RgbImage) -> Result<f64> + Sync,
{
    if images.len() < 2 {
        return Err(Error::Eval(format!(
            "pairwise diversity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let mut pairs = Vec::with_capacity(images.len() * (images.len() - 1) / 2);
    for i in 0..images.len() {
        for j in (i + 1)..images.len() {
            pairs.push((i, j));
        }
    }
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|(i, j)| distance(&images[*i], &images[*j]))
        .collect::<Result<_>>()?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

// ---- fidelity ----

fn mean_and_cov(embs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = embs.len();
    let d = embs[0].len();
    let mut mean = DVector::zeros(d);
    for e in embs {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embs {
        let c = DVector::from_column_slice(e) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Symmetric PSD matrix square root via eigendecomposition; negative
/// eigenvalues from roundoff clamp to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Regularization added to both covariance diagonals before the root.
pub const FIDELITY_EPSILON: f64 = 1e-6;

/// Squared Frechet distance between Gaussians fitted to two embedding
/// sets: `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_gaussian_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for (side, set) in [("first", a), ("second", b)] {
        if set.len() < 2 {
            return Err(Error::Eval(format!(
                "{side} set has {} embeddings; need at least 2",
                set.len()
            )));
        }
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|e| e.len() != d) {
        return Err(Error::Eval("embedding dimensions differ".into()));
    }
    let (mu1, mut s1) = mean_and_cov(a);
    let (mu2, mut s2) = mean_and_cov(b);
    for i in 0..d {
        s1[(i, i)] += FIDELITY_EPSILON;
        s2[(i, i)] += FIDELITY_EPSILON;
    }
    let s1h = sqrtm_psd(&s1);
    let inner = &s1h * &s2 * &s1h;
    let inner = 0.5 * (&inner + inner.transpose());
    let covmean = sqrtm_psd(&inner);
    let diff = mu1 - mu2;
    let d2 = diff.dot(&diff) + (s1 + s2 - 2.0 * covmean).trace();
    // Roundoff can push an exact zero slightly negative.
    Ok(d2.max(0.0))
}

/// Frechet distance between generated and reference image sets in the
/// encoder's embedding space.
pub fn fidelity_distance(
    generated: &[RgbImage],
    reference: &[RgbImage],
    encoder: &dyn EncoderClient,
) -> Result<f64> {
    let embed = |images: &[RgbImage]| -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|img| encoder.embed_image(img)).collect()
    };
    frechet_gaussian_distance(&embed(generated)?, &embed(reference)?)
}

// ---- report ----

/// One row of metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSet {
    pub emo_a: f64,
    pub sem_c: f64,
    pub sem_d: f64,
    pub diversity: f64,
    pub fidelity: f64,
}

impl MetricSet {
    fn values(&self) -> [f64; 5] {
        [self.emo_a, self.sem_c, self.sem_d, self.diversity, self.fidelity]
    }
}

/// Full evaluation result: a global row plus per-emotion breakdowns. The
/// global row is the mean of the per-emotion rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub global: MetricSet,
    pub per_emotion: BTreeMap<EmotionLabel, MetricSet>,
    pub metadata_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.per_emotion.is_empty() {
            return Err(Error::Eval("report covers no emotions".into()));
        }
        for (label, m) in &self.per_emotion {
            if m.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Eval(format!(
                    "non-finite metric for emotion '{label}'"
                )));
            }
        }
        let n = self.per_emotion.len() as f64;
        let mut mean = [0.0; 5];
        for m in self.per_emotion.values() {
            for (acc, v) in mean.iter_mut().zip(m.values()) {
                *acc += v;
            }
        }
        for acc in &mut mean {
            *acc /= n;
        }
        for (got, want) in self.global.values().iter().zip(mean) {
            if (got - want).abs() > 1e-9 {
                return Err(Error::Eval(format!(
                    "global metrics are not the per-emotion mean: {got} vs {want}"
                )));
            }
        }
        Ok(())
    }

    /// Single-line summary in the order fidelity, diversity, accuracy,
    /// clarity, diversity-of-content.
    pub fn table_row(&self) -> String {
        let g = &self.global;
        format!(
            "fidelity={:.4} diversity={:.4} emo_a={:.4} sem_c={:.4} sem_d={:.4}",
            g.fidelity, g.diversity, g.emo_a, g.sem_c, g.sem_d
        )
    }

    /// Human-readable key-value block plus the per-emotion table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let g = &self.global;
        out.push_str(&format!("emo_a     {:.6}\n", g.emo_a));
        out.push_str(&format!("sem_c     {:.6}\n", g.sem_c));
        out.push_str(&format!("sem_d     {:.6}\n", g.sem_d));
        out.push_str(&format!("diversity {:.6}\n", g.diversity));
        out.push_str(&format!("fidelity  {:.6}\n", g.fidelity));
        out.push_str(&format!("metadata  {}\n\n", self.metadata_hash));
        out.push_str("emotion      emo_a    sem_c    sem_d    diversity fidelity\n");
        for (label, m) in &self.per_emotion {
            out.push_str(&format!(
                "{:<12} {:<8.4} {:<8.4} {:<8.4} {:<9.4} {:.4}\n",
                label.name(),
                m.emo_a,
                m.sem_c,
                m.sem_d,
                m.diversity,
                m.fidelity
            ));
        }
        out
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// k for the semantic-diversity clustering.
    pub clusters: usize,
    /// Caption tokens per emotion pulled into the concept vocabulary.
    pub vocabulary_per_emotion: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clusters: 3,
            vocabulary_per_emotion: VOCABULARY_PER_EMOTION,
        }
    }
}

/// Inputs to a full evaluation run.
pub struct EvalInputs {
    /// Generated images, grouped by intended emotion.
    pub generated: BTreeMap<EmotionLabel, Vec<RgbImage>>,
    /// Reference corpus images, grouped by emotion.
    pub reference: BTreeMap<EmotionLabel, Vec<RgbImage>>,
    /// Concept vocabulary shared across emotions.
    pub vocabulary: Vec<String>,
    /// Free-form provenance (checkpoint hash, config echo); hashed into
    /// the report.
    pub metadata: String,
}

/// Runs all five metrics per emotion and aggregates by mean.
pub fn evaluate(
    inputs: &EvalInputs,
    encoder: &dyn EncoderClient,
    classifier: &dyn ClassifierClient,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if inputs.generated.is_empty() {
        return Err(Error::Eval("no generated images".into()));
    }
    let mut per_emotion = BTreeMap::new();
    for (label, images) in &inputs.generated {
        let reference = inputs.reference.get(label).ok_or_else(|| {
            Error::Eval(format!("no reference images for emotion '{label}'"))
        })?;
        let intended = vec![*label; images.len()];
        let mut single = BTreeMap::new();
        single.insert(*label, images.clone());
        let metrics = MetricSet {
            emo_a: emo_accuracy(images, &intended, classifier)?,
            sem_c: semantic_clarity(images, &inputs.vocabulary, encoder)?,
            sem_d: semantic_diversity(&single, encoder, cfg.clusters, cfg.seed)?,
            diversity: pairwise_diversity(images, pixel_distance)?,
            fidelity: fidelity_distance(images, reference, encoder)?,
        };
        per_emotion.insert(*label, metrics);
    }
    let n = per_emotion.len() as f64;
    let mut sums = [0.0; 5];
    for m in per_emotion.values() {
        for (acc, v) in sums.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    let report = EvalReport {
        global: MetricSet {
            emo_a: sums[0] / n,
            sem_c: sums[1] / n,
            sem_d: sums[2] / n,
            diversity: sums[3] / n,
            fidelity: sums[4] / n,
        },
        per_emotion,
        metadata_hash: sha256_hex(inputs.metadata.as_bytes()),
    };
    report.validate()?;
    Ok(report)
}
