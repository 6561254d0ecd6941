//! Dual-objective training: noise prediction plus semantic alignment over
//! the condition, with per-sample adapter routing and bit-exact resume.
//!
//! Random state is a pure function of (seed, stream tag, index), so a run
//! restarted from a checkpoint consumes exactly the streams the
//! uninterrupted run would have.

use crate::adapters::{AdapterBank, Route};
use crate::autodiff::{Tape, Tensor, Var};
use crate::conditioning::{build_condition, ConditionTrainFlags, EmotionMapper, VisualAttention};
use crate::corpus::{CorpusManifest, ImageStore};
use crate::diffusion::{encode_image, NoiseSchedule};
use crate::encoders::FrozenEncoders;
use crate::error::{Error, Result};
use crate::params::{load_params_from_map, params_hash, params_to_map, ParamBindings, Parameterized};
use crate::taxonomy::EmotionLabel;
use crate::unet::{Denoiser, DenoiserConfig, DenoiserTrainFlags};
use crate::util::{derive_seed, rng_for, sha256_hex};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

// ---- losses ----

/// Distance used by the semantic alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticLossKind {
    #[default]
    Cosine,
    Mae,
    Mse,
    KlSoftmax,
}

/// Mean squared error between the injected noise and the prediction.
pub fn noise_loss(tape: &mut Tape, noise: Var, pred: Var) -> Var {
    let d = tape.sub(noise, pred);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// `1 - cos(pooled, target)`, guarded by a small epsilon inside the root.
///
/// Range [0, 2] up to the guard. A zero-norm side signals a degenerate
/// condition and is rejected.
pub fn semantic_loss(tape: &mut Tape, pooled: Var, target: Var) -> Result<Var> {
    for (side, v) in [("condition", pooled), ("target", target)] {
        if tape.value(v).data.iter().all(|x| *x == 0.0) {
            return Err(Error::Loss(format!(
                "semantic loss {side} vector has zero norm"
            )));
        }
    }
    let dot = {
        let p = tape.mul(pooled, target);
        tape.sum_all(p)
    };
    let na = {
        let p = tape.mul(pooled, pooled);
        tape.sum_all(p)
    };
    let nb = {
        let p = tape.mul(target, target);
        tape.sum_all(p)
    };
    let prod = tape.mul(na, nb);
    let eps = tape.constant_scalar(1e-12);
    let guarded = tape.add(prod, eps);
    let denom = tape.powf(guarded, 0.5);
    let cos = tape.div(dot, denom);
    let one = tape.constant_scalar(1.0);
    Ok(tape.sub(one, cos))
}

/// Semantic distance under the configured kind; the non-cosine kinds are
/// the ablation variants.
pub fn semantic_loss_variant(
    tape: &mut Tape,
    kind: SemanticLossKind,
    pooled: Var,
    target: Var,
) -> Result<Var> {
    match kind {
        SemanticLossKind::Cosine => semantic_loss(tape, pooled, target),
        SemanticLossKind::Mae => {
            let d = tape.sub(pooled, target);
            let a = tape.abs(d);
            Ok(tape.mean_all(a))
        }
        SemanticLossKind::Mse => {
            let d = tape.sub(pooled, target);
            let sq = tape.mul(d, d);
            Ok(tape.mean_all(sq))
        }
        SemanticLossKind::KlSoftmax => {
            // KL(p || q) over softmax-normalized vectors, p from the target.
            let p = tape.softmax_rows(target);
            let q = tape.softmax_rows(pooled);
            let lp = tape.ln(p);
            let lq = tape.ln(q);
            let d = tape.sub(lp, lq);
            let term = tape.mul(p, d);
            Ok(tape.sum_all(term))
        }
    }
}

// ---- optimizer ----

/// Decoupled-weight-decay Adam settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer settings out of range".into()))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Per-parameter Adam moments, keyed by parameter name. Parameters appear
/// only once they have received a gradient, so unrouted adapters carry no
/// state and are never touched by decay.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    entries: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flattens the state into a named tensor map for serialization.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (name, mom) in &self.entries {
            map.insert(format!("m/{name}"), mom.m.clone());
            map.insert(format!("v/{name}"), mom.v.clone());
            map.insert(format!("step/{name}"), Tensor::scalar(mom.step as f64));
        }
        map
    }

    pub fn from_map(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (key, tensor) in map {
            let (kind, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("malformed optimizer key '{key}'")))?;
            let entry = entries.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(vec![0]),
                v: Tensor::zeros(vec![0]),
                step: u64::MAX,
            });
            match kind {
                "m" => entry.m = tensor.clone(),
                "v" => entry.v = tensor.clone(),
                "step" => {
                    if !tensor.is_scalar() || tensor.data[0] < 0.0 {
                        return Err(Error::Checkpoint(format!(
                            "bad optimizer step for '{name}'"
                        )));
                    }
                    entry.step = tensor.data[0] as u64;
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unknown optimizer key kind '{kind}'"
                    )))
                }
            }
        }
        for (name, mom) in &entries {
            if mom.step == u64::MAX || mom.m.shape != mom.v.shape {
                return Err(Error::Checkpoint(format!(
                    "incomplete optimizer entry for '{name}'"
                )));
            }
        }
        Ok(Self { entries })
    }
}

/// One Adam update over every parameter that has a gradient in `grads`.
///
/// Parameters without a gradient are left untouched, decay included; that
/// keeps unrouted adapters bit-identical across steps. Decay itself applies
/// only to matrices, so biases and norm gains never shrink, and a parameter
/// that is exactly zero is unchanged by decay regardless.
pub fn apply_updates(
    model: &mut dyn Parameterized,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut applied = 0usize;
    let mut shape_err: Option<String> = None;
    model.visit_params_mut(&mut |name, param| {
        let Some(grad) = grads.get(name) else {
            return;
        };
        if grad.shape != param.shape {
            shape_err.get_or_insert_with(|| {
                format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    grad.shape, param.shape
                )
            });
            return;
        }
        let mom = state.entries.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros_like(param),
            v: Tensor::zeros_like(param),
            step: 0,
        });
        mom.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(mom.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(mom.step as i32);
        let decay = if param.shape.len() >= 2 {
            cfg.weight_decay
        } else {
            0.0
        };
        for i in 0..param.numel() {
            let g = grad.data[i];
            mom.m.data[i] = cfg.beta1 * mom.m.data[i] + (1.0 - cfg.beta1) * g;
            mom.v.data[i] = cfg.beta2 * mom.v.data[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = mom.m.data[i] / bc1;
            let vhat = mom.v.data[i] / bc2;
            param.data[i] -=
                cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.epsilon) + decay * param.data[i]);
        }
        applied += 1;
    });
    if let Some(msg) = shape_err {
        return Err(Error::Input(msg));
    }
    if applied != grads.len() {
        let known: std::collections::BTreeSet<String> = {
            let mut names = std::collections::BTreeSet::new();
            model.visit_params_mut(&mut |name, _| {
                names.insert(name.to_string());
            });
            names
        };
        let orphan = grads
            .keys()
            .find(|k| !known.contains(*k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::Input(format!(
            "gradient for unknown parameter '{orphan}'"
        )));
    }
    Ok(())
}

// ---- model bundle ----

/// Structural description of the pipeline, sufficient to rebuild every
/// component from seeds. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub mapper_hidden: usize,
    pub denoiser: DenoiserConfig,
    pub adapter_rank: usize,
    pub adapter_scaling: f64,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 2,
            mapper_hidden: 64,
            denoiser: DenoiserConfig::default(),
            adapter_rank: 4,
            adapter_scaling: 1.0,
            init_seed: 0,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.embed_dim == 0 || self.mapper_hidden == 0 || self.encoder_depth == 0 {
            return Err(Error::Config("model widths must be nonzero".into()));
        }
        if self.denoiser.cond_dim != self.embed_dim {
            return Err(Error::Config(format!(
                "denoiser cond_dim {} must equal embed_dim {}",
                self.denoiser.cond_dim, self.embed_dim
            )));
        }
        if self.adapter_rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.adapter_scaling.is_finite() && self.adapter_scaling > 0.0) {
            return Err(Error::Config("adapter scaling must be positive".into()));
        }
        Ok(())
    }

    pub fn build_encoders(&self) -> FrozenEncoders {
        FrozenEncoders::init(
            self.embed_dim,
            self.encoder_depth,
            derive_seed(self.init_seed, "init/encoders", 0),
        )
    }

    pub fn build_denoiser(&self) -> Result<Denoiser> {
        Denoiser::init(
            self.denoiser.clone(),
            derive_seed(self.init_seed, "init/denoiser", 0),
        )
    }

    /// Builds the full freshly initialized pipeline.
    pub fn build(&self) -> Result<PipelineModel> {
        self.validate()?;
        let encoders = self.build_encoders();
        if self.denoiser.image_size != encoders.image.image_size() {
            return Err(Error::Config(format!(
                "denoiser image_size {} must match the image encoder's {}",
                self.denoiser.image_size,
                encoders.image.image_size()
            )));
        }
        let denoiser = self.build_denoiser()?;
        let adapters = denoiser.adapter_bank(
            self.adapter_rank,
            self.adapter_scaling,
            derive_seed(self.init_seed, "init/adapters", 0),
        );
        Ok(PipelineModel {
            mapper: EmotionMapper::init(
                self.embed_dim,
                self.mapper_hidden,
                derive_seed(self.init_seed, "init/mapper", 0),
            ),
            attention: VisualAttention::init(
                self.embed_dim,
                derive_seed(self.init_seed, "init/attention", 0),
            ),
            encoders,
            denoiser,
            adapters,
        })
    }
}

/// The assembled pipeline. The encoders and denoiser base stay frozen
/// during emotion training; mapper, attention, and adapters learn.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub encoders: FrozenEncoders,
    pub mapper: EmotionMapper,
    pub attention: VisualAttention,
    pub denoiser: Denoiser,
    pub adapters: AdapterBank,
}

impl PipelineModel {
    /// Content hashes of the frozen components.
    pub fn frozen_hashes(&self) -> (String, String) {
        (params_hash(&self.encoders), params_hash(&self.denoiser))
    }
}

/// The trainable set: mapper, attention, adapter bank.
impl Parameterized for PipelineModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mapper.visit_params(f);
        self.attention.visit_params(f);
        self.adapters.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mapper.visit_params_mut(f);
        self.attention.visit_params_mut(f);
        self.adapters.visit_params_mut(f);
    }
}

// ---- prepared data ----

/// One curated record with everything precomputed by the frozen encoders.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image_ref: String,
    pub label: EmotionLabel,
    /// Clean latent, [3, s, s].
    pub latent: Tensor,
    /// Visual tokens from the image encoder, [m, d].
    pub visual_tokens: Tensor,
    /// Pooled visual embedding, [d]; cluster fitting runs over these.
    pub visual_global: Tensor,
    /// Pooled caption embedding, [1, d]; the semantic target.
    pub caption_target: Tensor,
}

/// Encoded training corpus.
#[derive(Debug, Clone)]
pub struct TrainSet {
    items: Vec<TrainItem>,
}

impl TrainSet {
    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Labels present, in canonical order.
    pub fn labels(&self) -> Vec<EmotionLabel> {
        EmotionLabel::ALL
            .into_iter()
            .filter(|l| self.items.iter().any(|i| i.label == *l))
            .collect()
    }
}

/// Encodes a curated manifest into training items. Records must be clean:
/// no failures, captions present, refs unique.
pub fn prepare_training_set(
    manifest: &CorpusManifest,
    store: &dyn ImageStore,
    encoders: &FrozenEncoders,
) -> Result<TrainSet> {
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &manifest.records {
        if let Some(fail) = &r.failure {
            return Err(Error::Data(format!(
                "record '{}' carries a {} failure; curate before training",
                r.image_ref, fail.stage
            )));
        }
        if r.caption.is_empty() {
            return Err(Error::Data(format!(
                "record '{}' has no caption",
                r.image_ref
            )));
        }
        if !seen.insert(r.image_ref.as_str()) {
            return Err(Error::Data(format!(
                "duplicate image ref '{}' in training manifest",
                r.image_ref
            )));
        }
    }
    let items = manifest
        .records
        .par_iter()
        .map(|r| {
            let image = store.load(&r.image_ref)?;
            let encoded = encoders.image.encode(&image)?;
            let (_, pooled) = encoders.text.encode_text(&r.caption)?;
            Ok(TrainItem {
                image_ref: r.image_ref.clone(),
                label: r.label,
                latent: encode_image(&image),
                visual_tokens: encoded.tokens,
                visual_global: encoded.global,
                caption_target: pooled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSet { items })
}

// ---- training configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule_steps: usize,
    pub sem_loss_weight: f64,
    pub sem_loss: SemanticLossKind,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 1,
            schedule_steps: 50,
            sem_loss_weight: 1.0,
            sem_loss: SemanticLossKind::Cosine,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.schedule_steps < 2 {
            return Err(Error::Config("schedule_steps must be at least 2".into()));
        }
        if !(self.sem_loss_weight.is_finite() && self.sem_loss_weight >= 0.0) {
            return Err(Error::Config(
                "sem_loss_weight must be finite and non-negative".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// One balanced pass over the set: every present emotion oversampled to the
/// majority count, then shuffled. Deterministic per (seed, epoch).
pub fn epoch_order(set: &TrainSet, seed: u64, epoch: u64) -> Vec<usize> {
    let eseed = derive_seed(seed, "epoch", epoch);
    let mut by_label: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, item) in set.items.iter().enumerate() {
        by_label.entry(item.label.id() as u64).or_default().push(i);
    }
    let target = by_label.values().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(target * by_label.len());
    for (label_id, indices) in &by_label {
        order.extend_from_slice(indices);
        let mut rng = rng_for(eseed, "oversample-pad", *label_id);
        for _ in indices.len()..target {
            order.push(indices[rng.gen_range(0..indices.len())]);
        }
    }
    order.shuffle(&mut rng_for(eseed, "oversample-shuffle", 0));
    order
}

fn epoch_len(set: &TrainSet) -> usize {
    let mut counts: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    for item in &set.items {
        *counts.entry(item.label).or_default() += 1;
    }
    counts.values().max().copied().unwrap_or(0) * counts.len()
}

// ---- steps ----

/// Losses and bookkeeping for one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub emotion: EmotionLabel,
    pub l_ldm: f64,
    pub l_sem: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepReport {
    /// Fixed-width run-log line.
    pub fn log_line(&self) -> String {
        format!(
            "iter={} emotion={} l_ldm={:.6} l_sem={:.6} total={:.6} grad_norm={:.6}",
            self.iteration, self.emotion, self.l_ldm, self.l_sem, self.total, self.grad_norm
        )
    }
}

fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One optimization step over a uniform-emotion batch.
///
/// Draw streams are indexed by absolute sample slot, so a resumed run sees
/// the same noise and timesteps as an uninterrupted one. Updates exactly
/// the trainable set: mapper, attention, and the routed adapter pairs.
pub fn train_step(
    model: &mut PipelineModel,
    optimizer: &mut OptimizerState,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    items: &[&TrainItem],
    iteration: usize,
) -> Result<StepReport> {
    if items.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let label = items[0].label;
    if items.iter().any(|i| i.label != label) {
        return Err(Error::Input(
            "mixed-emotion batch; adapter routing needs one emotion per batch".into(),
        ));
    }
    let route = Route::new(label);
    let use_sem = cfg.sem_loss_weight != 0.0;

    let mut tape = Tape::new();
    let mut binds = ParamBindings::new();
    let mut ldm_terms = Vec::with_capacity(items.len());
    let mut sem_terms = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        let slot = (iteration * items.len() + k) as u64;
        let t = rng_for(cfg.seed, "timestep", slot).gen_range(0..schedule.steps());
        let eps = Tensor::randn(
            item.latent.shape.clone(),
            1.0,
            &mut rng_for(cfg.seed, "noise", slot),
        );
        let z_t = schedule.add_noise(&item.latent, &eps, t)?;

        let cond = build_condition(
            &mut tape,
            &mut binds,
            &model.mapper,
            &model.attention,
            &model.encoders.text,
            label,
            &item.visual_tokens,
            ConditionTrainFlags::ALL,
        )?;
        let zv = tape.constant(z_t);
        let pred = model.denoiser.forward(
            &mut tape,
            &mut binds,
            zv,
            t,
            cond.tokens,
            Some((&model.adapters, route)),
            DenoiserTrainFlags::ADAPTERS,
        )?;
        let ev = tape.constant(eps);
        ldm_terms.push(noise_loss(&mut tape, ev, pred));
        if use_sem {
            let target = tape.constant(item.caption_target.clone());
            sem_terms.push(semantic_loss_variant(
                &mut tape,
                cfg.sem_loss,
                cond.pooled,
                target,
            )?);
        }
    }

    let mean_of = |tape: &mut Tape, terms: &[Var]| {
        let mut acc = terms[0];
        for t in &terms[1..] {
            acc = tape.add(acc, *t);
        }
        if terms.len() > 1 {
            acc = tape.scale(acc, 1.0 / terms.len() as f64);
        }
        acc
    };
    let l_ldm = mean_of(&mut tape, &ldm_terms);
    let total = if use_sem {
        let l_sem = mean_of(&mut tape, &sem_terms);
        let weighted = tape.scale(l_sem, cfg.sem_loss_weight);
        let total = tape.add(l_ldm, weighted);
        (total, Some(l_sem))
    } else {
        (l_ldm, None)
    };
    let (total, l_sem) = total;

    let ldm_val = tape.value(l_ldm).data[0];
    let sem_val = l_sem.map(|v| tape.value(v).data[0]).unwrap_or(0.0);
    let total_val = tape.value(total).data[0];
    if !total_val.is_finite() {
        return Err(Error::Loss(format!(
            "non-finite loss at iteration {iteration}: l_ldm={ldm_val} l_sem={sem_val}"
        )));
    }

    let grad_table = tape.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, var) in binds.entries() {
        if let Some(g) = grad_table.get(*var) {
            grads.insert(name.clone(), g.clone());
        }
    }
    let norm = grad_norm(&grads);
    apply_updates(model, optimizer, &cfg.optimizer, &grads)?;

    Ok(StepReport {
        iteration,
        emotion: label,
        l_ldm: ldm_val,
        l_sem: sem_val,
        total: total_val,
        grad_norm: norm,
    })
}

/// Runs [`train_step`] from `start_iteration` up to `cfg.iterations`, drawing
/// samples from seeded oversampled epochs.
pub fn train(
    model: &mut PipelineModel,
    optimizer: &mut OptimizerState,
    set: &TrainSet,
    cfg: &TrainConfig,
    start_iteration: usize,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = NoiseSchedule::default_linear(cfg.schedule_steps)?;
    let elen = epoch_len(set);
    let mut cached_epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.iterations.saturating_sub(start_iteration));
    for iteration in start_iteration..cfg.iterations {
        let mut items: Vec<&TrainItem> = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let slot = iteration * cfg.batch_size + k;
            let epoch = (slot / elen) as u64;
            if epoch != cached_epoch {
                order = epoch_order(set, cfg.seed, epoch);
                cached_epoch = epoch;
            }
            items.push(&set.items[order[slot % elen]]);
        }
        let report = train_step(model, optimizer, &schedule, cfg, &items, iteration)?;
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

// ---- base pretraining ----

/// Settings for the unconditional pretraining of the denoiser base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub schedule_steps: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 400,
            schedule_steps: 50,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Trains the denoiser base on the null condition. Every base parameter
/// updates; adapters are not involved.
pub fn pretrain_base(
    denoiser: &mut Denoiser,
    set: &TrainSet,
    null_cond: &Tensor,
    cfg: &BaseTrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.optimizer.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = NoiseSchedule::default_linear(cfg.schedule_steps)?;
    let mut optimizer = OptimizerState::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let slot = iteration as u64;
        let item = &set.items[rng_for(cfg.seed, "base-sample", slot).gen_range(0..set.len())];
        let t = rng_for(cfg.seed, "base-timestep", slot).gen_range(0..schedule.steps());
        let eps = Tensor::randn(
            item.latent.shape.clone(),
            1.0,
            &mut rng_for(cfg.seed, "base-noise", slot),
        );
        let z_t = schedule.add_noise(&item.latent, &eps, t)?;

        let mut tape = Tape::new();
        let mut binds = ParamBindings::new();
        let zv = tape.constant(z_t);
        let cv = tape.constant(null_cond.clone());
        let pred = denoiser.forward(
            &mut tape,
            &mut binds,
            zv,
            t,
            cv,
            None,
            DenoiserTrainFlags::BASE,
        )?;
        let ev = tape.constant(eps);
        let loss = noise_loss(&mut tape, ev, pred);
        let loss_val = tape.value(loss).data[0];
        if !loss_val.is_finite() {
            return Err(Error::Loss(format!(
                "non-finite base loss at iteration {iteration}"
            )));
        }
        let grad_table = tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, var) in binds.entries() {
            if let Some(g) = grad_table.get(*var) {
                grads.insert(name.clone(), g.clone());
            }
        }
        apply_updates(denoiser, &mut optimizer, &cfg.optimizer, &grads)?;
        on_step(iteration, loss_val);
        losses.push(loss_val);
    }
    Ok(losses)
}

/// Cache key covering everything the pretrained base depends on.
pub fn base_cache_key(shape: &ModelShape, cfg: &BaseTrainConfig, manifest_hash: &str) -> String {
    let blob = serde_json::to_string(&(shape, cfg, manifest_hash)).expect("serializable");
    sha256_hex(blob.as_bytes())[..16].to_string()
}

/// Returns the pretrained base denoiser, training it only when no cached
/// copy exists for this exact configuration.
pub fn pretrain_or_load_base(
    cache_dir: &Path,
    shape: &ModelShape,
    cfg: &BaseTrainConfig,
    set: &TrainSet,
    null_cond: &Tensor,
    manifest_hash: &str,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Denoiser> {
    let key = base_cache_key(shape, cfg, manifest_hash);
    let path = cache_dir.join(format!("base-{key}.bin"));
    let mut denoiser = shape.build_denoiser()?;
    if path.exists() {
        let map = crate::io::read_tensor_map(&path)?;
        load_params_from_map(&mut denoiser, &map)?;
        return Ok(denoiser);
    }
    pretrain_base(&mut denoiser, set, null_cond, cfg, on_step)?;
    std::fs::create_dir_all(cache_dir)?;
    crate::io::write_tensor_map(&path, &params_to_map(&denoiser))?;
    Ok(denoiser)
}

// ---- checkpoints ----

pub const CHECKPOINT_META: &str = "meta.json";
pub const CHECKPOINT_TRAINABLE: &str = "trainable.bin";
pub const CHECKPOINT_OPTIMIZER: &str = "optimizer.bin";

/// Checkpoint descriptor. Frozen components are not stored; their hashes
/// guard against resuming onto incompatible bases. Together with the
/// iteration counter, the seed inside `train` captures the entire random
/// state, because draw streams are stateless per (seed, tag, index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub shape: ModelShape,
    pub train: TrainConfig,
    pub manifest_hash: String,
    pub encoders_hash: String,
    pub base_hash: String,
}

/// Loaded checkpoint parts, before reassembly against a base denoiser.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub trainable: BTreeMap<String, Tensor>,
    pub optimizer: OptimizerState,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &PipelineModel,
    optimizer: &OptimizerState,
    meta: &CheckpointMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join(CHECKPOINT_META), json + "\n")?;
    crate::io::write_tensor_map(&dir.join(CHECKPOINT_TRAINABLE), &params_to_map(model))?;
    crate::io::write_tensor_map(&dir.join(CHECKPOINT_OPTIMIZER), &optimizer.to_map())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(CHECKPOINT_META);
    let raw = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&raw)?;
    let trainable = crate::io::read_tensor_map(&dir.join(CHECKPOINT_TRAINABLE))?;
    let optimizer = OptimizerState::from_map(&crate::io::read_tensor_map(
        &dir.join(CHECKPOINT_OPTIMIZER),
    )?)?;
    Ok(Checkpoint {
        meta,
        trainable,
        optimizer,
    })
}

/// Rebuilds the pipeline from a checkpoint and a separately provided base
/// denoiser, verifying the frozen-component hashes.
pub fn assemble_model(ckpt: &Checkpoint, base: Denoiser) -> Result<PipelineModel> {
    let mut model = ckpt.meta.shape.build()?;
    let encoders_hash = params_hash(&model.encoders);
    if encoders_hash != ckpt.meta.encoders_hash {
        return Err(Error::Checkpoint(format!(
            "encoder hash mismatch: checkpoint {}, rebuilt {}",
            ckpt.meta.encoders_hash, encoders_hash
        )));
    }
    let base_hash = params_hash(&base);
    if base_hash != ckpt.meta.base_hash {
        return Err(Error::Checkpoint(format!(
            "base denoiser hash mismatch: checkpoint {}, provided {}",
            ckpt.meta.base_hash, base_hash
        )));
    }
    model.denoiser = base;
    load_params_from_map(&mut model, &ckpt.trainable)?;
    Ok(model)
}
