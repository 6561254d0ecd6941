//! Corpus curation: prompt rendering, captioning with retry, caption/image
//! agreement scoring, bottom-fraction filtering, confidence-based curation,
//! balancing oversampling, and token frequency reporting.
//!
//! Manifests serialize as JSON Lines, one record per line, so runs diff and
//! hash cleanly. All operations are deterministic for a fixed input order and
//! seed.

use crate::clients::{CaptionerClient, ClassifierClient, EncoderClient};
use crate::error::{Error, Result};
use crate::taxonomy::EmotionLabel;
use crate::util::{rng_for, sha256_hex};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Where a record's processing gave up, kept alongside the record so partial
/// batch failures stay visible instead of vanishing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    /// Pipeline stage that failed ("caption", "score", "classify").
    pub stage: String,
    /// Final error message after retries were exhausted.
    pub message: String,
    /// Attempts made, including the first.
    pub attempts: u32,
}

/// One corpus entry: an image reference with its label and caption state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_ref: String,
    pub label: EmotionLabel,
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub clip_score: Option<f64>,
    #[serde(default)]
    pub emotion_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RecordFailure>,
}

impl CorpusRecord {
    pub fn new(image_ref: impl Into<String>, label: EmotionLabel) -> Self {
        Self {
            image_ref: image_ref.into(),
            label,
            caption: String::new(),
            clip_score: None,
            emotion_confidence: None,
            failure: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// An ordered collection of corpus records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub records: Vec<CorpusRecord>,
}

impl CorpusManifest {
    pub fn new(records: Vec<CorpusRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per emotion, derived from the record list itself.
    pub fn per_emotion_counts(&self) -> BTreeMap<EmotionLabel, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    /// Emotions that appear at least once, in canonical order.
    pub fn present_emotions(&self) -> Vec<EmotionLabel> {
        let counts = self.per_emotion_counts();
        EmotionLabel::ALL
            .iter()
            .copied()
            .filter(|l| counts.contains_key(l))
            .collect()
    }

    /// Writes one JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a JSON Lines manifest; blank lines are skipped.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), idx + 1))
            })?;
            records.push(record);
        }
        Ok(Self { records })
    }

    /// Hash of the serialized manifest, for checkpoint compatibility checks.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for record in &self.records {
            bytes.extend_from_slice(&serde_json::to_vec(record).expect("record serializes"));
            bytes.push(b'\n');
        }
        sha256_hex(&bytes)
    }
}

/// Loads images behind a string reference.
pub trait ImageStore: Send + Sync {
    fn load(&self, image_ref: &str) -> Result<RgbImage>;
}

/// Directory-backed store: refs resolve relative to a root.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    root: PathBuf,
}

impl DirImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, image_ref: &str) -> PathBuf {
        self.root.join(image_ref)
    }
}

impl ImageStore for DirImageStore {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        let path = self.path_for(image_ref);
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(img.to_rgb8())
    }
}

/// In-memory store for tests and generated corpora.
#[derive(Debug, Clone, Default)]
pub struct MemImageStore {
    images: BTreeMap<String, RgbImage>,
}

impl MemImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, image: RgbImage) {
        self.images.insert(image_ref.into(), image);
    }
}

impl ImageStore for MemImageStore {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        self.images
            .get(image_ref)
            .cloned()
            .ok_or_else(|| Error::Data(format!("unknown image ref: {image_ref}")))
    }
}

/// Slot substituted with the sample's emotion name at render time.
pub const EMOTION_SLOT: &str = "<emotion>";

/// Captioning prompt template with its two content switches.
///
/// `emotional_prior` controls whether the prompt names the target emotion;
/// `detail_unconstrained` lifts the one-sentence limit. The default is the
/// configuration used for corpus building: prior on, one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPrompt {
    pub template: String,
    pub emotional_prior: bool,
    pub detail_unconstrained: bool,
}

const PRIOR_CLAUSE: &str = "This image evokes a strong emotion of <emotion>. ";
const ONE_SENTENCE_BODY: &str = "Provide a one-sentence caption that vividly describes the visual \
details, focusing on elements like brightness, colorfulness, scene type, object classes, facial \
expressions, and human actions";
const UNCONSTRAINED_BODY: &str = "Provide a detailed caption that vividly describes the visual \
details, including as many elements as possible, such as brightness, colorfulness, scene type, \
object classes, facial expressions, and human actions";
const PRIOR_TAIL: &str = " that effectively convey and express this emotion.";

impl CaptionPrompt {
    /// Builds the standard template for a switch combination.
    pub fn from_flags(emotional_prior: bool, detail_unconstrained: bool) -> Self {
        let body = if detail_unconstrained {
            UNCONSTRAINED_BODY
        } else {
            ONE_SENTENCE_BODY
        };
        let template = if emotional_prior {
            format!("{PRIOR_CLAUSE}{body}{PRIOR_TAIL}")
        } else {
            format!("{body}.")
        };
        Self { template, emotional_prior, detail_unconstrained }
    }
}

impl Default for CaptionPrompt {
    fn default() -> Self {
        Self::from_flags(true, false)
    }
}

/// Renders a prompt for one sample.
///
/// With the prior enabled the template must carry the emotion slot; with it
/// disabled the slot must be absent. Either mismatch is a template error.
pub fn render_prompt(prompt: &CaptionPrompt, label: EmotionLabel) -> Result<String> {
    let has_slot = prompt.template.contains(EMOTION_SLOT);
    if prompt.emotional_prior && !has_slot {
        return Err(Error::Template(format!(
            "emotional prior requested but template lacks the {EMOTION_SLOT} slot"
        )));
    }
    if !prompt.emotional_prior && has_slot {
        return Err(Error::Template(format!(
            "template contains {EMOTION_SLOT} but the emotional prior is disabled"
        )));
    }
    Ok(prompt.template.replace(EMOTION_SLOT, label.name()))
}

/// Retry budget for client calls. Attempts = 1 + `max_retries`, back to back;
/// pacing belongs to the client binding, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 2 }
    }
}

fn with_retry<T>(policy: RetryPolicy, mut call: impl FnMut() -> Result<T>) -> (Result<T>, u32) {
    let attempts = 1 + policy.max_retries;
    let mut last_err = None;
    for attempt in 1..=attempts {
        match call() {
            Ok(v) => return (Ok(v), attempt),
            Err(e) => last_err = Some(e),
        }
    }
    (Err(last_err.expect("at least one attempt ran")), attempts)
}

/// Captions every record, flagging per-record failures after retries.
///
/// Record order is preserved. If every record fails the whole batch is an
/// error; empty input is an error too.
pub fn caption_corpus(
    records: &[CorpusRecord],
    store: &dyn ImageStore,
    captioner: &dyn CaptionerClient,
    prompt: &CaptionPrompt,
    retry: RetryPolicy,
) -> Result<Vec<CorpusRecord>> {
    if records.is_empty() {
        return Err(Error::Curation("refusing to caption an empty record list".into()));
    }
    let mut rendered: BTreeMap<EmotionLabel, String> = BTreeMap::new();
    for r in records {
        if !rendered.contains_key(&r.label) {
            rendered.insert(r.label, render_prompt(prompt, r.label)?);
        }
    }
    let out: Vec<CorpusRecord> = records
        .par_iter()
        .map(|record| {
            let mut record = record.clone();
            let prompt_text = &rendered[&record.label];
            let (result, attempts) = with_retry(retry, || {
                let image = store.load(&record.image_ref)?;
                let caption = captioner.caption(&image, prompt_text)?;
                if caption.trim().is_empty() {
                    return Err(Error::Curation("captioner returned an empty caption".into()));
                }
                Ok(caption)
            });
            match result {
                Ok(caption) => {
                    record.caption = caption;
                    record.failure = None;
                }
                Err(e) => {
                    record.failure = Some(RecordFailure {
                        stage: "caption".into(),
                        message: e.to_string(),
                        attempts,
                    });
                }
            }
            record
        })
        .collect();
    if out.iter().all(CorpusRecord::is_failed) {
        return Err(Error::Curation(format!(
            "all {} records failed captioning; first error: {}",
            out.len(),
            out[0].failure.as_ref().map(|f| f.message.as_str()).unwrap_or("unknown")
        )));
    }
    Ok(out)
}

/// Scores caption/image agreement as the cosine similarity of the embedding
/// pair, writing it into `clip_score`. Records already flagged as failed are
/// passed through untouched; a record without a caption is an input error.
pub fn score_pairs(
    records: &[CorpusRecord],
    store: &dyn ImageStore,
    encoder: &dyn EncoderClient,
    retry: RetryPolicy,
) -> Result<Vec<CorpusRecord>> {
    for r in records {
        if !r.is_failed() && r.caption.trim().is_empty() {
            return Err(Error::Input(format!(
                "record {} has no caption to score",
                r.image_ref
            )));
        }
    }
    Ok(records
        .par_iter()
        .map(|record| {
            let mut record = record.clone();
            if record.is_failed() {
                return record;
            }
            let (result, attempts) = with_retry(retry, || {
                let image = store.load(&record.image_ref)?;
                let iv = encoder.embed_image(&image)?;
                let tv = encoder.embed_text(&record.caption)?;
                Ok(cosine(&iv, &tv))
            });
            match result {
                Ok(score) => record.clip_score = Some(score),
                Err(e) => {
                    record.failure = Some(RecordFailure {
                        stage: "score".into(),
                        message: e.to_string(),
                        attempts,
                    });
                }
            }
            record
        })
        .collect())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Drops the lowest-scoring `fraction` of records within each emotion.
///
/// The per-emotion drop count is `floor(fraction * n)`; ties break on
/// `(clip_score, image_ref)` so the outcome is total-ordered. Both returned
/// manifests preserve the input record order.
pub fn filter_bottom_fraction(
    manifest: &CorpusManifest,
    fraction: f64,
) -> Result<(CorpusManifest, CorpusManifest)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!(
            "filter fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let unscored: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| r.clip_score.is_none())
        .map(|r| r.image_ref.as_str())
        .collect();
    if !unscored.is_empty() {
        return Err(Error::Curation(format!(
            "cannot filter unscored records: {}",
            unscored.join(", ")
        )));
    }
    let mut drop_flags = vec![false; manifest.records.len()];
    for label in EmotionLabel::ALL {
        let mut group: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let n_drop = (fraction * group.len() as f64).floor() as usize;
        group.sort_by(|&a, &b| {
            let ra = &manifest.records[a];
            let rb = &manifest.records[b];
            ra.clip_score
                .partial_cmp(&rb.clip_score)
                .expect("scores are finite")
                .then_with(|| ra.image_ref.cmp(&rb.image_ref))
        });
        for &idx in group.iter().take(n_drop) {
            drop_flags[idx] = true;
        }
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, record) in manifest.records.iter().enumerate() {
        if drop_flags[i] {
            dropped.push(record.clone());
        } else {
            kept.push(record.clone());
        }
    }
    Ok((CorpusManifest::new(kept), CorpusManifest::new(dropped)))
}

/// Outcome of confidence curation: records kept with their predicted label
/// and confidence, and records rejected (low confidence, excluded category,
/// or classifier failure).
#[derive(Debug, Clone, Default)]
pub struct ConfidenceCuration {
    pub kept: CorpusManifest,
    pub rejected: Vec<CorpusRecord>,
}

/// Curates unlabeled or weakly labeled images by classifier confidence.
///
/// Each image is classified; its argmax emotion (lowest id on ties) becomes
/// the label when the confidence clears `threshold` and the emotion is not
/// excluded. Everything else lands in `rejected`, classifier failures with a
/// per-record flag.
pub fn curate_by_confidence(
    records: &[CorpusRecord],
    store: &dyn ImageStore,
    classifier: &dyn ClassifierClient,
    threshold: f64,
    excluded: &BTreeSet<EmotionLabel>,
    retry: RetryPolicy,
) -> Result<ConfidenceCuration> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Input(format!(
            "confidence threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let classified: Vec<CorpusRecord> = records
        .par_iter()
        .map(|record| {
            let mut record = record.clone();
            let (result, attempts) = with_retry(retry, || {
                let image = store.load(&record.image_ref)?;
                classifier.classify(&image)
            });
            match result {
                Ok(probs) => {
                    let (best, &conf) = probs
                        .iter()
                        .enumerate()
                        .max_by(|(ia, a), (ib, b)| {
                            a.partial_cmp(b)
                                .expect("probabilities are finite")
                                .then(ib.cmp(ia))
                        })
                        .expect("eight probabilities");
                    record.label = EmotionLabel::from_id(best).expect("index in range");
                    record.emotion_confidence = Some(conf);
                    record.failure = None;
                }
                Err(e) => {
                    record.failure = Some(RecordFailure {
                        stage: "classify".into(),
                        message: e.to_string(),
                        attempts,
                    });
                }
            }
            record
        })
        .collect();
    let mut curation = ConfidenceCuration::default();
    for record in classified {
        let keep = !record.is_failed()
            && record.emotion_confidence.map_or(false, |c| c >= threshold)
            && !excluded.contains(&record.label);
        if keep {
            curation.kept.records.push(record);
        } else {
            curation.rejected.push(record);
        }
    }
    Ok(curation)
}

/// Balances the corpus by random oversampling with replacement up to the
/// largest per-emotion count, then shuffles the epoch order. Deterministic
/// for a fixed seed. Every original record appears at least once; when the
/// corpus is already balanced the result is exactly a permutation of the
/// input.
pub fn oversample(manifest: &CorpusManifest, seed: u64) -> Result<Vec<CorpusRecord>> {
    if manifest.is_empty() {
        return Err(Error::Curation("cannot oversample an empty manifest".into()));
    }
    let counts = manifest.per_emotion_counts();
    let target = *counts.values().max().expect("non-empty manifest");
    let mut out = Vec::new();
    for label in EmotionLabel::ALL {
        let group: Vec<&CorpusRecord> = manifest
            .records
            .iter()
            .filter(|r| r.label == label)
            .collect();
        if group.is_empty() {
            continue;
        }
        out.extend(group.iter().map(|r| (*r).clone()));
        let mut rng = rng_for(seed, "oversample-pad", label.id() as u64);
        for _ in group.len()..target {
            let pick = rng.gen_range(0..group.len());
            out.push(group[pick].clone());
        }
    }
    let mut rng = rng_for(seed, "oversample-shuffle", 0);
    out.shuffle(&mut rng);
    Ok(out)
}

/// Conventional English function words excluded from frequency reports.
pub const DEFAULT_STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "its",
    "of", "on", "or", "that", "the", "this", "to", "with",
];

/// Per-emotion token frequency over captions, lowercased, split on
/// non-alphanumeric boundaries, stop words removed.
pub fn token_frequency_report(
    manifest: &CorpusManifest,
    stop_words: &BTreeSet<String>,
) -> BTreeMap<EmotionLabel, BTreeMap<String, usize>> {
    let mut report = BTreeMap::new();
    for record in &manifest.records {
        let entry: &mut BTreeMap<String, usize> =
            report.entry(record.label).or_default();
        for token in crate::clients::tokenize(&record.caption) {
            if stop_words.contains(&token) {
                continue;
            }
            *entry.entry(token).or_insert(0) += 1;
        }
    }
    report
}

/// `DEFAULT_STOP_WORDS` as an owned set.
pub fn default_stop_words() -> BTreeSet<String> {
    DEFAULT_STOP_WORDS.iter().map(|w| w.to_string()).collect()
}
