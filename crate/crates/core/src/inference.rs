//! Image generation from a trained pipeline: per-emotion visual clusters,
//! ancestral sampling with optional guidance, emotion transfer onto text
//! concepts, and two-emotion fusion.
//!
//! Every image derives its own seed from the run seed, and every random
//! draw lives on its own tagged stream, so results are independent of
//! worker count and of which variant drew what.

use crate::adapters::Route;
use crate::autodiff::{Tape, Tensor};
use crate::conditioning::null_condition;
use crate::diffusion::{decode_latent, NoiseSchedule};
use crate::encoders::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::params::{params_hash, ParamBindings};
use crate::taxonomy::EmotionLabel;
use crate::training::{PipelineModel, TrainSet};
use crate::unet::Denoiser;
use crate::util::{derive_seed, rng_for};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---- visual clusters ----

/// Diagonal Gaussian over an emotion's pooled visual embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionCluster {
    pub label: EmotionLabel,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub sample_count: usize,
}

/// Fitted clusters for every emotion seen during training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSet {
    clusters: BTreeMap<EmotionLabel, EmotionCluster>,
}

impl ClusterSet {
    pub fn get(&self, label: EmotionLabel) -> Option<&EmotionCluster> {
        self.clusters.get(&label)
    }

    pub fn labels(&self) -> Vec<EmotionLabel> {
        self.clusters.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let mut dim = None;
        for (label, c) in &self.clusters {
            if c.label != *label {
                return Err(Error::Cluster(format!(
                    "cluster keyed '{label}' carries label '{}'",
                    c.label
                )));
            }
            if c.mean.len() != c.variance.len() || c.mean.is_empty() {
                return Err(Error::Cluster(format!(
                    "cluster '{label}' has inconsistent dimensions"
                )));
            }
            if *dim.get_or_insert(c.mean.len()) != c.mean.len() {
                return Err(Error::Cluster(
                    "clusters disagree on embedding dimension".into(),
                ));
            }
            if c.sample_count < 2 {
                return Err(Error::Cluster(format!(
                    "cluster '{label}' was fitted on {} samples; need at least 2",
                    c.sample_count
                )));
            }
            if c.variance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Cluster(format!(
                    "cluster '{label}' has a negative or non-finite variance"
                )));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Cluster(format!("{}: {e}", path.display())))?;
        let set: Self = serde_json::from_str(&raw)?;
        set.validate()?;
        Ok(set)
    }
}

/// Conventional cluster file name inside a checkpoint directory.
pub const CLUSTER_FILE: &str = "clusters.json";

/// Fits one diagonal Gaussian per emotion over the pooled visual
/// embeddings of the training set.
///
/// Members are ordered by image ref before accumulation, so the fit does
/// not depend on manifest order. Variance uses the population divisor `n`.
pub fn fit_clusters(set: &TrainSet) -> Result<ClusterSet> {
    let mut groups: BTreeMap<EmotionLabel, Vec<(&str, &Tensor)>> = BTreeMap::new();
    for item in set.items() {
        groups
            .entry(item.label)
            .or_default()
            .push((item.image_ref.as_str(), &item.visual_global));
    }
    let mut clusters = BTreeMap::new();
    for (label, mut members) in groups {
        if members.len() < 2 {
            return Err(Error::Cluster(format!(
                "emotion '{label}' has {} training samples; cluster fitting needs at least 2",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.0.cmp(b.0));
        let n = members.len() as f64;
        let dim = members[0].1.numel();
        let mut mean = vec![0.0; dim];
        for (_, g) in &members {
            for (m, x) in mean.iter_mut().zip(&g.data) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut variance = vec![0.0; dim];
        for (_, g) in &members {
            for (v, (x, m)) in variance.iter_mut().zip(g.data.iter().zip(&mean)) {
                let d = x - m;
                *v += d * d;
            }
        }
        for v in &mut variance {
            *v /= n;
        }
        clusters.insert(
            label,
            EmotionCluster {
                label,
                mean,
                variance,
                sample_count: members.len(),
            },
        );
    }
    let set = ClusterSet { clusters };
    set.validate()?;
    Ok(set)
}

/// Draws one visual context token from a cluster, shape [1, dim]. With
/// zero variance the draw is the mean itself.
pub fn sample_cluster(cluster: &EmotionCluster, rng: &mut impl Rng) -> Tensor {
    let dim = cluster.mean.len();
    let data = (0..dim)
        .map(|j| {
            let z: f64 = rng.sample(StandardNormal);
            cluster.mean[j] + cluster.variance[j].sqrt() * z
        })
        .collect();
    Tensor::new(vec![1, dim], data)
}

// ---- ancestral sampler ----

/// Runs the reverse diffusion chain from pure noise under a fixed
/// condition. `guidance == 1.0` uses the conditional prediction alone;
/// other scales blend in an unconditional pass against `null_cond`.
pub fn sample_latent(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    null_cond: &Tensor,
    guidance: f64,
    adapters: Option<(&crate::adapters::AdapterBank, Route)>,
    img_seed: u64,
) -> Result<Tensor> {
    let size = denoiser.config().image_size;
    let mut z = Tensor::randn(
        vec![3, size, size],
        1.0,
        &mut rng_for(img_seed, "sample/init", 0),
    );
    for t in (0..schedule.steps()).rev() {
        let eps_c = denoiser.predict(&z, t, cond, adapters)?;
        let eps = if guidance == 1.0 {
            eps_c
        } else {
            let eps_u = denoiser.predict(&z, t, null_cond, adapters)?;
            let data = eps_u
                .data
                .iter()
                .zip(&eps_c.data)
                .map(|(u, c)| u + guidance * (c - u))
                .collect();
            Tensor::new(eps_c.shape.clone(), data)
        };
        // Posterior mean through the implied clean latent, clamped to the
        // image range. Without the clamp, per-step prediction bias
        // compounds over the chain and drifts whole channels out of range.
        let ab = schedule.alpha_bar(t);
        let ab_prev = if t > 0 { schedule.alpha_bar(t - 1) } else { 1.0 };
        let x0_coef = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
        let zt_coef = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mut next: Vec<f64> = z
            .data
            .iter()
            .zip(&eps.data)
            .map(|(zv, ev)| {
                let x0 = ((zv - (1.0 - ab).sqrt() * ev) / ab.sqrt()).clamp(-1.0, 1.0);
                x0_coef * x0 + zt_coef * zv
            })
            .collect();
        if t > 0 {
            let sigma = schedule.posterior_sigma(t);
            let noise = Tensor::randn(
                z.shape.clone(),
                1.0,
                &mut rng_for(img_seed, "sample/step", t as u64),
            );
            for (x, n) in next.iter_mut().zip(&noise.data) {
                *x += sigma * n;
            }
        }
        z = Tensor::new(z.shape, next);
    }
    Ok(z)
}

// ---- generation driver ----

/// One sampled image with its derived seed.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub index: usize,
    pub image_seed: u64,
    pub latent: Tensor,
}

/// Metadata written next to every rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSidecar {
    pub emotions: Vec<EmotionLabel>,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub image_seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub checkpoint: String,
}

/// Seed for the i-th image of a run.
pub fn image_seed(run_seed: u64, index: usize) -> u64 {
    derive_seed(run_seed, "image", index as u64)
}

/// Sampling front end over a trained pipeline and its fitted clusters.
pub struct Generator<'a> {
    model: &'a PipelineModel,
    clusters: &'a ClusterSet,
    schedule: NoiseSchedule,
    guidance: f64,
    null_tokens: Tensor,
    checkpoint_hash: String,
}

impl<'a> Generator<'a> {
    pub fn new(
        model: &'a PipelineModel,
        clusters: &'a ClusterSet,
        steps: usize,
        guidance: f64,
    ) -> Result<Self> {
        if !(guidance.is_finite() && guidance > 0.0) {
            return Err(Error::Input(format!(
                "guidance scale {guidance} must be positive and finite"
            )));
        }
        let schedule = NoiseSchedule::default_linear(steps)?;
        let (null_tokens, _) = null_condition(&model.encoders.text)?;
        Ok(Self {
            model,
            clusters,
            schedule,
            guidance,
            null_tokens,
            checkpoint_hash: params_hash(model),
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn guidance(&self) -> f64 {
        self.guidance
    }

    /// Hash of the trainable parameters this generator samples from.
    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    fn cluster(&self, label: EmotionLabel) -> Result<&EmotionCluster> {
        self.clusters.get(label).ok_or_else(|| {
            Error::Cluster(format!("no fitted cluster for emotion '{label}'"))
        })
    }

    /// Visual context draw for one image. The stream is tagged by emotion,
    /// so drawing for one emotion never perturbs another's draws or the
    /// sampler streams.
    fn draw_visual(&self, img_seed: u64, label: EmotionLabel) -> Result<Tensor> {
        let cluster = self.cluster(label)?;
        Ok(sample_cluster(
            cluster,
            &mut rng_for(img_seed, "visual", label.id() as u64),
        ))
    }

    /// Grounded pseudo-token for a descriptor over visual context tokens.
    fn pseudo(&self, descriptor: &Tensor, v_tokens: &Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let d = tape.constant(descriptor.clone());
        let v = tape.constant(v_tokens.clone());
        let p = self.model.attention.forward(&mut tape, &mut binds, d, v, false);
        tape.value(p).clone()
    }

    /// Encodes a condition row sequence: BOS embedding, any concept token
    /// embeddings, an optional pseudo-token, then EOS.
    fn encode_condition(&self, content_ids: &[usize], pseudo: Option<&Tensor>) -> Result<Tensor> {
        let text = &self.model.encoders.text;
        let dim = text.dim();
        let mut ids = vec![BOS_ID];
        ids.extend_from_slice(content_ids);
        let mut rows = text.embedding_rows(&ids).data;
        if let Some(p) = pseudo {
            rows.extend_from_slice(&p.data);
        }
        rows.extend_from_slice(&text.embedding_rows(&[EOS_ID]).data);
        let n = rows.len() / dim;
        let mut tape = Tape::inference();
        let mut binds = ParamBindings::new();
        let rv = tape.constant(Tensor::new(vec![n, dim], rows));
        let enc = text.encode_rows(&mut tape, &mut binds, rv)?;
        Ok(tape.value(enc.hidden).clone())
    }

    fn content_ids(&self, concept: &str) -> Result<Vec<usize>> {
        let ids = self.model.encoders.text.token_ids(concept)?;
        Ok(ids[1..ids.len() - 1].to_vec())
    }

    /// One emotion-conditioned image.
    pub fn generate_one(&self, label: EmotionLabel, img_seed: u64) -> Result<Tensor> {
        let v = self.draw_visual(img_seed, label)?;
        let descriptor = self.model.mapper.descriptor(label);
        let pseudo = self.pseudo(&descriptor, &v);
        let cond = self.encode_condition(&[], Some(&pseudo))?;
        sample_latent(
            &self.model.denoiser,
            &self.schedule,
            &cond,
            &self.null_tokens,
            self.guidance,
            Some((&self.model.adapters, Route::new(label))),
            img_seed,
        )
    }

    /// One image from a plain text concept, without any emotion machinery.
    pub fn generate_from_text(&self, concept: &str, img_seed: u64) -> Result<Tensor> {
        let cond = self.encode_condition(&self.content_ids(concept)?, None)?;
        sample_latent(
            &self.model.denoiser,
            &self.schedule,
            &cond,
            &self.null_tokens,
            self.guidance,
            None,
            img_seed,
        )
    }

    /// One image expressing `label` over a text concept. `blend` in [0, 1]
    /// scales the emotion pseudo-token; 0 reduces to the plain concept
    /// image, 1 applies the full emotion.
    pub fn transfer_one(
        &self,
        concept: &str,
        label: EmotionLabel,
        blend: f64,
        img_seed: u64,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&blend) {
            return Err(Error::Input(format!("blend {blend} outside [0, 1]")));
        }
        if blend == 0.0 {
            return self.generate_from_text(concept, img_seed);
        }
        let v = self.draw_visual(img_seed, label)?;
        let descriptor = self.model.mapper.descriptor(label);
        let mut pseudo = self.pseudo(&descriptor, &v);
        if blend != 1.0 {
            for x in &mut pseudo.data {
                *x *= blend;
            }
        }
        let cond = self.encode_condition(&self.content_ids(concept)?, Some(&pseudo))?;
        sample_latent(
            &self.model.denoiser,
            &self.schedule,
            &cond,
            &self.null_tokens,
            self.guidance,
            Some((&self.model.adapters, Route::new(label))),
            img_seed,
        )
    }

    /// One image mixing two emotions: descriptors and visual draws are
    /// both interpolated, and the adapter route follows the dominant side.
    /// The endpoints delegate to the single-emotion path.
    pub fn fuse_one(
        &self,
        a: EmotionLabel,
        b: EmotionLabel,
        weight: f64,
        img_seed: u64,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Input(format!("fusion weight {weight} outside [0, 1]")));
        }
        if weight == 1.0 {
            return self.generate_one(a, img_seed);
        }
        if weight == 0.0 {
            return self.generate_one(b, img_seed);
        }
        let va = self.draw_visual(img_seed, a)?;
        let vb = self.draw_visual(img_seed, b)?;
        let ea = self.model.mapper.descriptor(a);
        let eb = self.model.mapper.descriptor(b);
        let mix = |x: &Tensor, y: &Tensor| {
            let data = x
                .data
                .iter()
                .zip(&y.data)
                .map(|(xa, xb)| weight * xa + (1.0 - weight) * xb)
                .collect();
            Tensor::new(x.shape.clone(), data)
        };
        let pseudo = self.pseudo(&mix(&ea, &eb), &mix(&va, &vb));
        let cond = self.encode_condition(&[], Some(&pseudo))?;
        let route = Route::new(if weight >= 0.5 { a } else { b });
        sample_latent(
            &self.model.denoiser,
            &self.schedule,
            &cond,
            &self.null_tokens,
            self.guidance,
            Some((&self.model.adapters, route)),
            img_seed,
        )
    }

    fn run_batch(
        &self,
        count: usize,
        run_seed: u64,
        one: impl Fn(u64) -> Result<Tensor> + Sync,
    ) -> Result<Vec<GeneratedImage>> {
        if count == 0 {
            return Err(Error::Input("image count must be at least 1".into()));
        }
        (0..count)
            .into_par_iter()
            .map(|index| {
                let seed = image_seed(run_seed, index);
                Ok(GeneratedImage {
                    index,
                    image_seed: seed,
                    latent: one(seed)?,
                })
            })
            .collect()
    }

    pub fn generate(
        &self,
        label: EmotionLabel,
        count: usize,
        run_seed: u64,
    ) -> Result<Vec<GeneratedImage>> {
        self.run_batch(count, run_seed, |s| self.generate_one(label, s))
    }

    pub fn transfer(
        &self,
        concept: &str,
        label: EmotionLabel,
        blend: f64,
        count: usize,
        run_seed: u64,
    ) -> Result<Vec<GeneratedImage>> {
        self.run_batch(count, run_seed, |s| self.transfer_one(concept, label, blend, s))
    }

    pub fn fuse(
        &self,
        a: EmotionLabel,
        b: EmotionLabel,
        weight: f64,
        count: usize,
        run_seed: u64,
    ) -> Result<Vec<GeneratedImage>> {
        self.run_batch(count, run_seed, |s| self.fuse_one(a, b, weight, s))
    }

    /// Renders latents to `dir/subdir/NNNN.png` with a JSON sidecar each.
    /// Returns the PNG paths in index order.
    pub fn write_outputs(
        &self,
        dir: &Path,
        subdir: &str,
        images: &[GeneratedImage],
        emotions: &[EmotionLabel],
        weights: &[f64],
        run_seed: u64,
    ) -> Result<Vec<PathBuf>> {
        let out = dir.join(subdir);
        std::fs::create_dir_all(&out)?;
        let mut paths = Vec::with_capacity(images.len());
        for img in images {
            let png = out.join(format!("{:04}.png", img.index));
            decode_latent(&img.latent)?.save(&png)?;
            let sidecar = OutputSidecar {
                emotions: emotions.to_vec(),
                weights: weights.to_vec(),
                seed: run_seed,
                image_seed: img.image_seed,
                steps: self.schedule.steps(),
                guidance: self.guidance,
                checkpoint: self.checkpoint_hash.clone(),
            };
            let json = serde_json::to_string_pretty(&sidecar)?;
            std::fs::write(out.join(format!("{:04}.json", img.index)), json + "\n")?;
            paths.push(png);
        }
        Ok(paths)
    }
}
