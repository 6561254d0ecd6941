//! Command-line front end for the emotion-conditioned generation pipeline.
//!
//! One executable, one config file, subcommands for each pipeline stage:
//! synth, curate, train, generate, transfer, fuse, evaluate, report.
//! Precedence is flags over config file over profile defaults; the resolved
//! config is echoed into every output directory so runs stay reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;

use emodiff_core::clients::{ProjectionEncoder, TemplateCaptioner};
use emodiff_core::config::RunConfig;
use emodiff_core::corpus::{
    caption_corpus, curate_by_confidence, default_stop_words, filter_bottom_fraction,
    score_pairs, token_frequency_report, CaptionPrompt, CorpusManifest, CorpusRecord,
    DirImageStore, ImageStore, RetryPolicy,
};
use emodiff_core::eval::{evaluate, manifest_vocabulary, EvalInputs, EvalReport};
use emodiff_core::inference::{fit_clusters, ClusterSet, Generator, CLUSTER_FILE};
use emodiff_core::synth;
use emodiff_core::training::{
    assemble_model, base_cache_key, load_checkpoint, pretrain_or_load_base, save_checkpoint,
    prepare_training_set, train, CheckpointMeta, OptimizerState, PipelineModel,
    SemanticLossKind, TrainSet,
};
use emodiff_core::unet::Denoiser;
use emodiff_core::util::derive_seed;
use emodiff_core::EmotionLabel;

const RAW_MANIFEST: &str = "raw-manifest.jsonl";
const CURATED_MANIFEST: &str = "curated-manifest.jsonl";
const DROPPED_MANIFEST: &str = "dropped-manifest.jsonl";
const DISTRIBUTION_REPORT: &str = "distribution.json";
const TOKEN_REPORT: &str = "token-report.json";
const TRAIN_LOG: &str = "train-log.txt";
const REPORT_JSON: &str = "report.json";
const REPORT_TEXT: &str = "report.txt";

/// Exit code for curation runs that wrote their successes but carried
/// per-record failures.
const EXIT_PARTIAL: u8 = 3;

/// Embedding width of the caption/image scoring client used for curation
/// and evaluation. Independent of the generative model.
const JUDGE_EMBED_DIM: usize = 64;
/// Held-out images per class behind the evaluation classifier.
const JUDGE_PER_CLASS: usize = 24;
const JUDGE_EPOCHS: usize = 300;

#[derive(Parser)]
#[command(
    name = "emodiff",
    version,
    about = "Emotion-conditioned image generation pipeline",
    propagate_version = true
)]
struct Cli {
    /// Path to a TOML config file. Defaults to ./emodiff.toml when present,
    /// otherwise the built-in test profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap on parallel workers for curation, generation, and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the bundled synthetic corpus and its raw manifest.
    Synth(SynthArgs),
    /// Caption, score, and filter the corpus into a curated manifest.
    Curate(CurateArgs),
    /// Train the adapters, mapper, and attention against a curated corpus.
    Train(TrainArgs),
    /// Sample images for one emotion (or all fitted emotions).
    Generate(GenerateArgs),
    /// Render a neutral concept under an emotion at a chosen blend.
    Transfer(TransferArgs),
    /// Blend two emotions at a chosen weight.
    Fuse(FuseArgs),
    /// Score generated images against a reference corpus.
    Evaluate(EvaluateArgs),
    /// Re-render a stored evaluation report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Images per emotion class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Corpus generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Destination directory (defaults to paths.corpus_dir).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct CurateArgs {
    /// Corpus directory holding the raw manifest and images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Bottom fraction of records dropped per emotion, in [0, 1).
    #[arg(long)]
    fraction: Option<f64>,
    /// Per-record retry budget for captioning and scoring.
    #[arg(long)]
    retries: Option<u32>,
    /// Run classifier-confidence curation after alignment filtering.
    #[arg(long)]
    confidence: bool,
    /// Confidence threshold for --confidence, in [0, 1].
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Total iterations to reach (also the resume target).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue from the checkpoint in the checkpoint directory.
    #[arg(long)]
    resume: bool,
    /// Ablation: drop the semantic alignment term entirely.
    #[arg(long)]
    no_sem_loss: bool,
    /// Weight of the semantic alignment term.
    #[arg(long, conflicts_with = "no_sem_loss")]
    sem_weight: Option<f64>,
    /// Semantic loss variant: cosine, mae, mse, or kl-softmax.
    #[arg(long)]
    sem_loss: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Emotion name, a comma list, or "all" for every fitted cluster.
    #[arg(long)]
    emotion: String,
    /// Images per emotion.
    #[arg(short = 'n', long)]
    count: Option<usize>,
    /// Run seed; image seeds derive from it per index.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Neutral concept text to render under the emotion.
    #[arg(long)]
    concept: String,
    #[arg(long)]
    emotion: String,
    /// Pseudo-token blend strength in [0, 1]; 0 ignores the emotion.
    #[arg(long, default_value_t = 1.0)]
    blend: f64,
    #[arg(short = 'n', long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// First emotion; carries the routing when weight >= 0.5.
    #[arg(long)]
    a: String,
    /// Second emotion.
    #[arg(long)]
    b: String,
    /// Weight on the first emotion, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[arg(short = 'n', long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of generated images grouped in per-emotion subdirectories.
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Reference corpus: a manifest directory or per-emotion subdirectories.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Manifest whose captions seed the concept vocabulary
    /// (defaults to the curated manifest in paths.corpus_dir).
    #[arg(long)]
    vocabulary_from: Option<PathBuf>,
    /// Where the report lands (defaults to paths.output_dir/eval).
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON to render (defaults to paths.output_dir/eval/report.json).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Optional path for the rendered text.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    cfg.apply_env(|key| std::env::var(key).ok());
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(&mut cfg, args),
        Cmd::Curate(args) => cmd_curate(&mut cfg, args),
        Cmd::Train(args) => cmd_train(&mut cfg, args),
        Cmd::Generate(args) => cmd_generate(&mut cfg, args),
        Cmd::Transfer(args) => cmd_transfer(&mut cfg, args),
        Cmd::Fuse(args) => cmd_fuse(&mut cfg, args),
        Cmd::Evaluate(args) => cmd_evaluate(&mut cfg, args),
        Cmd::Report(args) => cmd_report(&cfg, args),
    }
}

fn load_config(flag: Option<&Path>) -> Result<RunConfig> {
    match flag {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config '{}'", path.display())),
        None => {
            let default = Path::new("emodiff.toml");
            if default.exists() {
                RunConfig::load(default).context("loading ./emodiff.toml")
            } else {
                Ok(RunConfig::default())
            }
        }
    }
}

fn parse_emotion(s: &str) -> Result<EmotionLabel> {
    s.parse::<EmotionLabel>()
        .with_context(|| format!("unknown emotion '{s}'"))
}

/// "all" expands to the full taxonomy; otherwise a comma list of names.
fn parse_emotions(s: &str) -> Result<Vec<EmotionLabel>> {
    if s == "all" {
        return Ok(EmotionLabel::ALL.to_vec());
    }
    s.split(',').map(|part| parse_emotion(part.trim())).collect()
}

fn write_json_file<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n")
        .with_context(|| format!("writing '{}'", path.display()))?;
    Ok(())
}

// ---- synth ----

fn cmd_synth(cfg: &mut RunConfig, args: SynthArgs) -> Result<u8> {
    if let Some(n) = args.per_class {
        cfg.corpus.per_class = n;
    }
    if let Some(s) = args.seed {
        cfg.corpus.seed = s;
    }
    if let Some(dir) = args.corpus {
        cfg.paths.corpus_dir = dir;
    }
    cfg.validate()?;
    let dir = cfg.paths.corpus_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let manifest = synth::write_corpus(&dir, cfg.corpus.per_class, cfg.corpus.seed)?;
    manifest.write_jsonl(&dir.join(RAW_MANIFEST))?;
    cfg.echo_into(&dir)?;
    println!(
        "synth: wrote {} images across {} classes to {}",
        manifest.records.len(),
        manifest.present_emotions().len(),
        dir.display()
    );
    Ok(0)
}

// ---- curate ----

fn cmd_curate(cfg: &mut RunConfig, args: CurateArgs) -> Result<u8> {
    if let Some(dir) = args.corpus {
        cfg.paths.corpus_dir = dir;
    }
    if let Some(f) = args.fraction {
        cfg.corpus.filter_fraction = f;
    }
    if let Some(r) = args.retries {
        cfg.corpus.caption_retries = r;
    }
    if args.confidence {
        cfg.corpus.use_confidence = true;
    }
    if let Some(t) = args.threshold {
        cfg.corpus.confidence_threshold = t;
    }
    cfg.validate()?;

    let dir = cfg.paths.corpus_dir.clone();
    let raw_path = dir.join(RAW_MANIFEST);
    let manifest = CorpusManifest::read_jsonl(&raw_path).with_context(|| {
        format!(
            "reading '{}'; run `emodiff synth` or point --corpus at a corpus",
            raw_path.display()
        )
    })?;
    let store = DirImageStore::new(&dir);
    let retry = RetryPolicy {
        max_retries: cfg.corpus.caption_retries,
    };
    let prompt =
        CaptionPrompt::from_flags(cfg.corpus.emotional_prior, cfg.corpus.detail_unconstrained);
    let captioned = caption_corpus(&manifest.records, &store, &TemplateCaptioner, &prompt, retry)?;

    let encoder = ProjectionEncoder::new(
        JUDGE_EMBED_DIM,
        derive_seed(cfg.corpus.seed, "curation-encoder", 0),
    );
    let scored = score_pairs(&captioned, &store, &encoder, retry)?;

    let (clean, failed): (Vec<CorpusRecord>, Vec<CorpusRecord>) =
        scored.into_iter().partition(|r| !r.is_failed());
    if clean.is_empty() {
        bail!("every record failed captioning or scoring; nothing to curate");
    }
    let (mut kept, dropped) =
        filter_bottom_fraction(&CorpusManifest::new(clean), cfg.corpus.filter_fraction)?;

    let mut rejected = dropped.records;
    if cfg.corpus.use_confidence {
        let classifier = synth::train_classifier(
            JUDGE_PER_CLASS,
            derive_seed(cfg.corpus.seed, "confidence-judge", 0),
            JUDGE_EPOCHS,
        );
        let excluded = cfg.corpus.confidence_excluded.iter().copied().collect();
        let outcome = curate_by_confidence(
            &kept.records,
            &store,
            &classifier,
            cfg.corpus.confidence_threshold,
            &excluded,
            retry,
        )?;
        kept = outcome.kept;
        rejected.extend(outcome.rejected);
    }

    kept.write_jsonl(&dir.join(CURATED_MANIFEST))?;
    let mut dropped_all = rejected;
    dropped_all.extend(failed.iter().cloned());
    CorpusManifest::new(dropped_all.clone()).write_jsonl(&dir.join(DROPPED_MANIFEST))?;

    let distribution: BTreeMap<&str, BTreeMap<EmotionLabel, usize>> = BTreeMap::from([
        ("kept", kept.per_emotion_counts()),
        ("dropped", CorpusManifest::new(dropped_all).per_emotion_counts()),
    ]);
    write_json_file(&dir.join(DISTRIBUTION_REPORT), &distribution)?;
    let tokens = token_frequency_report(&kept, &default_stop_words());
    write_json_file(&dir.join(TOKEN_REPORT), &tokens)?;
    cfg.echo_into(&dir)?;

    println!(
        "curate: kept {} records, dropped {}, {} failed",
        kept.records.len(),
        distribution["dropped"].values().sum::<usize>(),
        failed.len()
    );
    if !failed.is_empty() {
        for record in &failed {
            let failure = record.failure.as_ref().expect("partitioned on is_failed");
            eprintln!(
                "record '{}' failed at {} after {} attempts: {}",
                record.image_ref, failure.stage, failure.attempts, failure.message
            );
        }
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

// ---- train ----

fn resolve_sem_loss(name: &str) -> Result<SemanticLossKind> {
    Ok(match name {
        "cosine" => SemanticLossKind::Cosine,
        "mae" => SemanticLossKind::Mae,
        "mse" => SemanticLossKind::Mse,
        "kl-softmax" => SemanticLossKind::KlSoftmax,
        other => bail!("unknown semantic loss '{other}' (expected cosine, mae, mse, or kl-softmax)"),
    })
}

fn load_curated(cfg: &RunConfig) -> Result<(CorpusManifest, DirImageStore)> {
    let dir = &cfg.paths.corpus_dir;
    let path = dir.join(CURATED_MANIFEST);
    let manifest = CorpusManifest::read_jsonl(&path).with_context(|| {
        format!("reading '{}'; run `emodiff curate` first", path.display())
    })?;
    Ok((manifest, DirImageStore::new(dir)))
}

fn cmd_train(cfg: &mut RunConfig, args: TrainArgs) -> Result<u8> {
    if let Some(dir) = args.corpus {
        cfg.paths.corpus_dir = dir;
    }
    if let Some(dir) = args.checkpoint {
        cfg.paths.checkpoint_dir = dir;
    }
    if let Some(dir) = args.cache {
        cfg.paths.cache_dir = dir;
    }
    if let Some(n) = args.iterations {
        cfg.train.iterations = n;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.optimizer.learning_rate = lr;
    }
    if args.no_sem_loss {
        cfg.train.sem_loss_weight = 0.0;
    }
    if let Some(w) = args.sem_weight {
        cfg.train.sem_loss_weight = w;
    }
    if let Some(name) = &args.sem_loss {
        cfg.train.sem_loss = resolve_sem_loss(name)?;
    }
    cfg.validate()?;

    let (manifest, store) = load_curated(cfg)?;
    let manifest_hash = manifest.content_hash();
    let encoders = cfg.model.build_encoders();
    let set = prepare_training_set(&manifest, &store, &encoders)?;
    println!(
        "train: prepared {} items across {} emotions (manifest {})",
        set.len(),
        set.labels().len(),
        &manifest_hash[..12]
    );

    let base = load_or_pretrain_base(cfg, &set, &manifest_hash)?;

    let ckpt_dir = cfg.paths.checkpoint_dir.clone();
    let (mut model, mut optimizer, start_iteration, append_log) = if args.resume {
        let ckpt = load_checkpoint(&ckpt_dir)
            .with_context(|| format!("resuming from '{}'", ckpt_dir.display()))?;
        if ckpt.meta.manifest_hash != manifest_hash {
            bail!(
                "checkpoint was trained on manifest {} but the corpus now hashes to {}",
                ckpt.meta.manifest_hash,
                manifest_hash
            );
        }
        if ckpt.meta.shape != cfg.model {
            bail!("checkpoint model shape differs from the configured shape");
        }
        let mut resumed = ckpt.meta.train.clone();
        resumed.iterations = cfg.train.iterations;
        if resumed != cfg.train {
            bail!(
                "resume requires identical training settings (only --iterations may grow)"
            );
        }
        if ckpt.meta.iteration >= cfg.train.iterations {
            bail!(
                "checkpoint is already at iteration {}; raise --iterations to continue",
                ckpt.meta.iteration
            );
        }
        let start = ckpt.meta.iteration;
        let optimizer = ckpt.optimizer.clone();
        let model = assemble_model(&ckpt, base)?;
        (model, optimizer, start, true)
    } else {
        let mut model = cfg.model.build()?;
        model.denoiser = base;
        (model, OptimizerState::new(), 0, false)
    };

    std::fs::create_dir_all(&ckpt_dir)?;
    let log_path = ckpt_dir.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(append_log)
            .truncate(!append_log)
            .write(true)
            .open(&log_path)
            .with_context(|| format!("opening '{}'", log_path.display()))?,
    );
    let print_every = (cfg.train.iterations / 20).max(1);
    let total = cfg.train.iterations;
    {
        use std::io::Write;
        let mut on_step = |report: &emodiff_core::training::StepReport| {
            let line = report.log_line();
            writeln!(log, "{line}").expect("train log writable");
            if (report.iteration + 1) % print_every == 0 || report.iteration + 1 == total {
                println!("{line}");
            }
        };
        train(
            &mut model,
            &mut optimizer,
            &set,
            &cfg.train,
            start_iteration,
            &mut on_step,
        )?;
    }
    {
        use std::io::Write;
        log.flush()?;
    }

    let meta = CheckpointMeta {
        iteration: cfg.train.iterations,
        shape: cfg.model.clone(),
        train: cfg.train.clone(),
        manifest_hash,
        encoders_hash: frozen_encoders_hash(&model),
        base_hash: frozen_base_hash(&model),
    };
    save_checkpoint(&ckpt_dir, &model, &optimizer, &meta)?;
    let clusters = fit_clusters(&set)?;
    clusters.write_json(&ckpt_dir.join(CLUSTER_FILE))?;
    cfg.echo_into(&ckpt_dir)?;
    println!(
        "train: saved checkpoint at iteration {} with {} clusters to {}",
        meta.iteration,
        clusters.len(),
        ckpt_dir.display()
    );
    Ok(0)
}

fn frozen_encoders_hash(model: &PipelineModel) -> String {
    model.frozen_hashes().0
}

fn frozen_base_hash(model: &PipelineModel) -> String {
    model.frozen_hashes().1
}

fn load_or_pretrain_base(
    cfg: &RunConfig,
    set: &TrainSet,
    manifest_hash: &str,
) -> Result<Denoiser> {
    let key = base_cache_key(&cfg.model, &cfg.base, manifest_hash);
    let cache_path = cfg.paths.cache_dir.join(format!("base-{key}.bin"));
    if cache_path.exists() {
        println!("base: using cached denoiser {}", cache_path.display());
    } else {
        println!(
            "base: pretraining {} iterations (cache miss at {})",
            cfg.base.iterations,
            cache_path.display()
        );
    }
    let encoders = cfg.model.build_encoders();
    let (null_tokens, _) = emodiff_core::conditioning::null_condition(&encoders.text)?;
    let print_every = (cfg.base.iterations / 10).max(1);
    let mut on_step = |iter: usize, loss: f64| {
        if (iter + 1) % print_every == 0 {
            println!("base iter={iter} loss={loss:.6}");
        }
    };
    let base = pretrain_or_load_base(
        &cfg.paths.cache_dir,
        &cfg.model,
        &cfg.base,
        set,
        &null_tokens,
        manifest_hash,
        &mut on_step,
    )?;
    Ok(base)
}

// ---- generation commands ----

struct GeneratorParts {
    model: PipelineModel,
    clusters: ClusterSet,
    steps: usize,
}

/// Rebuilds the pipeline from the checkpoint directory plus the cached base
/// denoiser whose parameter hash the checkpoint recorded.
fn load_generator_parts(cfg: &RunConfig) -> Result<GeneratorParts> {
    let ckpt_dir = &cfg.paths.checkpoint_dir;
    let ckpt = load_checkpoint(ckpt_dir)
        .with_context(|| format!("loading checkpoint from '{}'", ckpt_dir.display()))?;
    let base = find_cached_base(&cfg.paths.cache_dir, &ckpt.meta)?;
    let steps = ckpt.meta.train.schedule_steps;
    let model = assemble_model(&ckpt, base)?;
    let clusters_path = ckpt_dir.join(CLUSTER_FILE);
    let clusters = ClusterSet::read_json(&clusters_path)
        .with_context(|| format!("loading '{}'", clusters_path.display()))?;
    Ok(GeneratorParts {
        model,
        clusters,
        steps,
    })
}

/// Scans the cache for the base denoiser matching the checkpoint's recorded
/// hash. The scan keeps generation working even when the base config that
/// produced the cache entry is no longer in the config file.
fn find_cached_base(cache_dir: &Path, meta: &CheckpointMeta) -> Result<Denoiser> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(cache_dir)
        .with_context(|| format!("reading cache dir '{}'", cache_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("base-") && n.ends_with(".bin"))
        })
        .collect();
    entries.sort();
    for path in &entries {
        let Ok(map) = emodiff_core::io::read_tensor_map(path) else {
            continue;
        };
        let mut denoiser = meta.shape.build_denoiser()?;
        if emodiff_core::params::load_params_from_map(&mut denoiser, &map).is_err() {
            continue;
        }
        if emodiff_core::params::params_hash(&denoiser) == meta.base_hash {
            return Ok(denoiser);
        }
    }
    bail!(
        "no cached base denoiser in '{}' matches the checkpoint hash {}; re-run `emodiff train`",
        cache_dir.display(),
        meta.base_hash
    )
}

fn apply_sample_overrides(
    cfg: &mut RunConfig,
    count: Option<usize>,
    guidance: Option<f64>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) {
    if let Some(n) = count {
        cfg.sample.count = n;
    }
    if let Some(g) = guidance {
        cfg.sample.guidance = g;
    }
    if let Some(dir) = checkpoint {
        cfg.paths.checkpoint_dir = dir;
    }
    if let Some(dir) = out {
        cfg.paths.output_dir = dir;
    }
}

fn cmd_generate(cfg: &mut RunConfig, args: GenerateArgs) -> Result<u8> {
    let labels = parse_emotions(&args.emotion)?;
    apply_sample_overrides(cfg, args.count, args.guidance, args.checkpoint, args.out);
    let parts = load_generator_parts(cfg)?;
    let generator = Generator::new(&parts.model, &parts.clusters, parts.steps, cfg.sample.guidance)?;
    let out_root = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_root)?;
    let run_seed = args.seed;
    for label in &labels {
        let images = generator.generate(*label, cfg.sample.count, run_seed)?;
        let paths = generator.write_outputs(
            &out_root,
            label.name(),
            &images,
            &[*label],
            &[1.0],
            run_seed,
        )?;
        println!(
            "generate: {} images for '{}' under {}",
            paths.len(),
            label,
            out_root.join(label.name()).display()
        );
    }
    cfg.echo_into(&out_root)?;
    Ok(0)
}

fn cmd_transfer(cfg: &mut RunConfig, args: TransferArgs) -> Result<u8> {
    let label = parse_emotion(&args.emotion)?;
    apply_sample_overrides(cfg, args.count, args.guidance, args.checkpoint, args.out);
    let parts = load_generator_parts(cfg)?;
    let generator = Generator::new(&parts.model, &parts.clusters, parts.steps, cfg.sample.guidance)?;
    let out_root = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_root)?;
    let run_seed = args.seed;
    let images = generator.transfer(&args.concept, label, args.blend, cfg.sample.count, run_seed)?;
    let subdir = format!("transfer-{label}");
    let paths = generator.write_outputs(
        &out_root,
        &subdir,
        &images,
        &[label],
        &[args.blend],
        run_seed,
    )?;
    println!(
        "transfer: {} images of '{}' as '{}' (blend {}) under {}",
        paths.len(),
        args.concept,
        label,
        args.blend,
        out_root.join(&subdir).display()
    );
    cfg.echo_into(&out_root)?;
    Ok(0)
}

fn cmd_fuse(cfg: &mut RunConfig, args: FuseArgs) -> Result<u8> {
    let a = parse_emotion(&args.a)?;
    let b = parse_emotion(&args.b)?;
    apply_sample_overrides(cfg, args.count, args.guidance, args.checkpoint, args.out);
    let parts = load_generator_parts(cfg)?;
    let generator = Generator::new(&parts.model, &parts.clusters, parts.steps, cfg.sample.guidance)?;
    let out_root = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_root)?;
    let run_seed = args.seed;
    let images = generator.fuse(a, b, args.weight, cfg.sample.count, run_seed)?;
    let subdir = format!("fuse-{a}-{b}");
    let paths = generator.write_outputs(
        &out_root,
        &subdir,
        &images,
        &[a, b],
        &[args.weight, 1.0 - args.weight],
        run_seed,
    )?;
    println!(
        "fuse: {} images of '{}'+'{}' (weight {}) under {}",
        paths.len(),
        a,
        b,
        args.weight,
        out_root.join(&subdir).display()
    );
    cfg.echo_into(&out_root)?;
    Ok(0)
}

// ---- evaluate / report ----

fn load_png_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            Ok(image::open(p)
                .with_context(|| format!("opening '{}'", p.display()))?
                .to_rgb8())
        })
        .collect()
}

/// Loads images grouped into per-emotion subdirectories; non-emotion
/// directory names are ignored.
fn load_grouped(dir: &Path, flag: &str) -> Result<BTreeMap<EmotionLabel, Vec<RgbImage>>> {
    if !dir.is_dir() {
        bail!("directory '{}' does not exist ({flag})", dir.display());
    }
    let mut grouped = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for sub in entries {
        let Some(name) = sub.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Ok(label) = name.parse::<EmotionLabel>() else {
            continue;
        };
        let images = load_png_dir(&sub)?;
        if !images.is_empty() {
            grouped.insert(label, images);
        }
    }
    if grouped.is_empty() {
        bail!(
            "no per-emotion images found under '{}' ({flag})",
            dir.display()
        );
    }
    Ok(grouped)
}

/// Reference images come from a curated or raw manifest when one is present,
/// otherwise from per-emotion subdirectories.
fn load_reference(dir: &Path) -> Result<BTreeMap<EmotionLabel, Vec<RgbImage>>> {
    if !dir.is_dir() {
        bail!("directory '{}' does not exist (--reference)", dir.display());
    }
    for name in [CURATED_MANIFEST, RAW_MANIFEST] {
        let path = dir.join(name);
        if path.exists() {
            let manifest = CorpusManifest::read_jsonl(&path)?;
            let store = DirImageStore::new(dir);
            let mut grouped: BTreeMap<EmotionLabel, Vec<RgbImage>> = BTreeMap::new();
            for record in &manifest.records {
                grouped
                    .entry(record.label)
                    .or_default()
                    .push(store.load(&record.image_ref)?);
            }
            return Ok(grouped);
        }
    }
    load_grouped(dir, "--reference")
}

fn cmd_evaluate(cfg: &mut RunConfig, args: EvaluateArgs) -> Result<u8> {
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if let Some(k) = args.clusters {
        cfg.eval.clusters = k;
    }
    let generated_dir = args.generated.unwrap_or_else(|| cfg.paths.output_dir.clone());
    let reference_dir = args.reference.unwrap_or_else(|| cfg.paths.corpus_dir.clone());
    let report_dir = args
        .report_dir
        .unwrap_or_else(|| cfg.paths.output_dir.join("eval"));

    let generated = load_grouped(&generated_dir, "--generated")?;
    let reference = load_reference(&reference_dir)?;

    let vocab_path = args
        .vocabulary_from
        .unwrap_or_else(|| cfg.paths.corpus_dir.join(CURATED_MANIFEST));
    let vocab_manifest = CorpusManifest::read_jsonl(&vocab_path).with_context(|| {
        format!(
            "reading captions for the concept vocabulary from '{}' (--vocabulary-from)",
            vocab_path.display()
        )
    })?;
    let vocabulary = manifest_vocabulary(&vocab_manifest, cfg.eval.vocabulary_per_emotion);

    let encoder = ProjectionEncoder::new(
        JUDGE_EMBED_DIM,
        derive_seed(cfg.eval.seed, "eval-encoder", 0),
    );
    let classifier = synth::train_classifier(
        JUDGE_PER_CLASS,
        derive_seed(cfg.eval.seed, "eval-judge", 0),
        JUDGE_EPOCHS,
    );
    let metadata = format!(
        "generated={} reference={} vocabulary={} seed={}",
        generated_dir.display(),
        reference_dir.display(),
        vocab_path.display(),
        cfg.eval.seed
    );
    let inputs = EvalInputs {
        generated,
        reference,
        vocabulary,
        metadata,
    };
    let report = evaluate(&inputs, &encoder, &classifier, &cfg.eval)?;

    std::fs::create_dir_all(&report_dir)?;
    write_json_file(&report_dir.join(REPORT_JSON), &report)?;
    std::fs::write(report_dir.join(REPORT_TEXT), report.render())?;
    cfg.echo_into(&report_dir)?;
    print!("{}", report.render());
    println!("{}", report.table_row());
    Ok(0)
}

fn cmd_report(cfg: &RunConfig, args: ReportArgs) -> Result<u8> {
    let path = args
        .input
        .unwrap_or_else(|| cfg.paths.output_dir.join("eval").join(REPORT_JSON));
    let raw = std::fs::read_to_string(&path)
        .with_context(|| format!("reading report '{}' (--input)", path.display()))?;
    let report: EvalReport = serde_json::from_str(&raw)?;
    report.validate()?;
    let rendered = report.render();
    if let Some(out) = args.out {
        std::fs::write(&out, &rendered)
            .with_context(|| format!("writing '{}'", out.display()))?;
    }
    print!("{rendered}");
    println!("{}", report.table_row());
    Ok(0)
}
