//! Run configuration: one TOML file driving every pipeline stage.
//!
//! Precedence is CLI flags over config-file sections over profile
//! defaults. A section present in the file replaces that profile section
//! wholesale. Unknown keys anywhere are rejected, and the resolved
//! configuration is echoed into every output directory so runs stay
//! self-describing.

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::taxonomy::EmotionLabel;
use crate::training::{BaseTrainConfig, ModelShape, TrainConfig};
use crate::unet::DenoiserConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Scale preset. `test` runs the whole pipeline on a desk in minutes;
/// `production` carries full-scale hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Test,
    Production,
}

/// Filesystem layout. These are the only settings that environment
/// variables may override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "outputs".into(),
            cache_dir: "cache".into(),
        }
    }
}

/// Corpus construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Images per class for the bundled synthetic generator.
    pub per_class: usize,
    /// Bottom fraction dropped per emotion by alignment filtering.
    pub filter_fraction: f64,
    /// Caption retry budget per record.
    pub caption_retries: u32,
    /// Run classifier-confidence curation after alignment filtering.
    pub use_confidence: bool,
    pub confidence_threshold: f64,
    pub confidence_excluded: Vec<EmotionLabel>,
    /// Prompt names the target emotion.
    pub emotional_prior: bool,
    /// Lift the one-sentence caption limit.
    pub detail_unconstrained: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_class: 100,
            filter_fraction: 0.2,
            caption_retries: 2,
            use_confidence: false,
            confidence_threshold: 0.75,
            confidence_excluded: vec![EmotionLabel::Excitement, EmotionLabel::Disgust],
            emotional_prior: true,
            detail_unconstrained: false,
        }
    }
}

/// Sampling settings shared by generate, transfer, and fuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 1.0,
            count: 50,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub base: BaseTrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

/// File-level view: absent sections fall back to the profile defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    paths: Option<PathsConfig>,
    corpus: Option<CorpusConfig>,
    model: Option<ModelShape>,
    train: Option<TrainConfig>,
    base: Option<BaseTrainConfig>,
    sample: Option<SampleConfig>,
    eval: Option<EvalConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::defaults(Profile::Test)
    }
}

impl RunConfig {
    /// Baseline configuration for a profile.
    pub fn defaults(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            base: BaseTrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        };
        if profile == Profile::Production {
            cfg.model = ModelShape {
                embed_dim: 768,
                encoder_depth: 4,
                mapper_hidden: 768,
                denoiser: DenoiserConfig {
                    image_size: 32,
                    channels: [64, 128, 192],
                    cond_dim: 768,
                    time_dim: 128,
                    time_hidden: 256,
                },
                adapter_rank: 8,
                adapter_scaling: 1.0,
                init_seed: 0,
            };
            cfg.train.iterations = 130_000;
            cfg.train.schedule_steps = 1000;
            cfg.train.optimizer.learning_rate = 1e-4;
            cfg.base.iterations = 20_000;
            cfg.base.schedule_steps = 1000;
            cfg.base.optimizer.learning_rate = 1e-4;
            cfg.sample.steps = 1000;
            cfg.sample.guidance = 7.5;
        }
        cfg
    }

    /// Parses a TOML document, overlaying present sections on the profile
    /// baseline. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::defaults(raw.profile.unwrap_or_default());
        if let Some(v) = raw.paths {
            cfg.paths = v;
        }
        if let Some(v) = raw.corpus {
            cfg.corpus = v;
        }
        if let Some(v) = raw.model {
            cfg.model = v;
        }
        if let Some(v) = raw.train {
            cfg.train = v;
        }
        if let Some(v) = raw.base {
            cfg.base = v;
        }
        if let Some(v) = raw.sample {
            cfg.sample = v;
        }
        if let Some(v) = raw.eval {
            cfg.eval = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.base.optimizer.validate()?;
        if self.corpus.per_class == 0 {
            return Err(Error::Config("corpus.per_class must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.corpus.filter_fraction) {
            return Err(Error::Config(format!(
                "corpus.filter_fraction {} outside [0, 1)",
                self.corpus.filter_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.corpus.confidence_threshold) {
            return Err(Error::Config(format!(
                "corpus.confidence_threshold {} outside [0, 1]",
                self.corpus.confidence_threshold
            )));
        }
        if self.sample.count == 0 {
            return Err(Error::Config("sample.count must be at least 1".into()));
        }
        if !(self.sample.guidance.is_finite() && self.sample.guidance > 0.0) {
            return Err(Error::Config(format!(
                "sample.guidance {} must be positive",
                self.sample.guidance
            )));
        }
        // The denoiser sees only timesteps it trained on; all three
        // schedules must agree.
        if self.sample.steps != self.train.schedule_steps
            || self.base.schedule_steps != self.train.schedule_steps
        {
            return Err(Error::Config(format!(
                "schedule lengths disagree: train {}, base {}, sample {}",
                self.train.schedule_steps, self.base.schedule_steps, self.sample.steps
            )));
        }
        if self.eval.clusters == 0 {
            return Err(Error::Config("eval.clusters must be at least 1".into()));
        }
        if self.eval.vocabulary_per_emotion == 0 {
            return Err(Error::Config(
                "eval.vocabulary_per_emotion must be at least 1".into(),
            ));
        }
        for dir in [
            &self.paths.corpus_dir,
            &self.paths.checkpoint_dir,
            &self.paths.output_dir,
            &self.paths.cache_dir,
        ] {
            if dir.as_os_str().is_empty() {
                return Err(Error::Config("empty path in [paths]".into()));
            }
        }
        Ok(())
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into an output directory.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved-config.toml"), self.to_toml())?;
        Ok(())
    }

    /// Applies path overrides from an environment lookup. Only paths are
    /// overridable this way.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("EMODIFF_CORPUS_DIR") {
            self.paths.corpus_dir = v.into();
        }
        if let Some(v) = get("EMODIFF_CHECKPOINT_DIR") {
            self.paths.checkpoint_dir = v.into();
        }
        if let Some(v) = get("EMODIFF_OUTPUT_DIR") {
            self.paths.output_dir = v.into();
        }
        if let Some(v) = get("EMODIFF_CACHE_DIR") {
            self.paths.cache_dir = v.into();
        }
    }
}
