//! Operator entry point: data preparation, embedding precomputation,
//! training, synthesis, ablation studies, objective evaluation, and a
//! self-test command.
//!
//! Exit codes: 0 success, 2 invalid input, 3 backend failure, 4 training
//! divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    generate_synthetic, parse_manifest, split_sized, synthetic_inventory, write_manifest, Corpus,
    Inventory, Language, Lexicon, SentenceEntry, SyntheticSpec, UtteranceKey,
};
use crate::cu_encoder::{
    brute_force_attention, multi_head_cu_attention, AttentionDims, AttentionParams,
};
use crate::features::{
    frame_count, griffin_lim, load_audio, mel_spectrogram, save_mel, save_mel_png, save_wav,
    trim_silence, MelParams, MelSpectrogram,
};
use crate::taco_lite::{
    build_training_set, free_running_mse, gradient_check, load_checkpoint, prepare_context,
    save_checkpoint, teacher_forced_loss, train, Checkpoint, CuMode, Model, ModelConfig,
    TacoError, TrainConfig, UtteranceContext,
};
use crate::text_context::{
    build_cse_chunks, build_window, embed_window_cse, embed_window_pse, EmbeddingCache,
    SentenceWindow, StubBackend, TextContextError, WhitespaceTokenizer,
};
use crate::nn::Adam;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

type CResult<T> = Result<T, CliFailure>;

fn invalid(msg: impl Into<String>) -> CliFailure {
    CliFailure {
        code: EXIT_INVALID,
        message: msg.into(),
    }
}

fn backend_failure(msg: impl Into<String>) -> CliFailure {
    CliFailure {
        code: EXIT_BACKEND,
        message: msg.into(),
    }
}

impl From<TextContextError> for CliFailure {
    fn from(e: TextContextError) -> Self {
        let code = match &e {
            TextContextError::Backend { .. } | TextContextError::DimensionMismatch { .. } => {
                EXIT_BACKEND
            }
            _ => EXIT_INVALID,
        };
        CliFailure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TacoError> for CliFailure {
    fn from(e: TacoError) -> Self {
        match e {
            TacoError::Divergence { .. } => CliFailure {
                code: EXIT_DIVERGED,
                message: e.to_string(),
            },
            TacoError::TextContext(inner) => inner.into(),
            other => invalid(other.to_string()),
        }
    }
}

impl From<crate::corpus::CorpusError> for CliFailure {
    fn from(e: crate::corpus::CorpusError) -> Self {
        invalid(e.to_string())
    }
}

impl From<crate::features::FeatureError> for CliFailure {
    fn from(e: crate::features::FeatureError) -> Self {
        invalid(e.to_string())
    }
}

impl From<std::io::Error> for CliFailure {
    fn from(e: std::io::Error) -> Self {
        invalid(e.to_string())
    }
}

impl From<serde_json::Error> for CliFailure {
    fn from(e: serde_json::Error) -> Self {
        invalid(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cutts",
    about = "Cross-utterance context conditioning for spectrogram synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn audio manifests into trimmed mel features, or generate a
    /// synthetic corpus.
    Prepare(PrepareArgs),
    /// Precompute and cache context embeddings for a manifest.
    Embed(EmbedArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Synthesize one utterance from a checkpoint.
    Synth(SynthArgs),
    /// Synthesize the same sentence under alternative previous sentences
    /// and report spectrogram differences.
    Ablate(AblateArgs),
    /// Teacher-forced loss and free-running mel distance on a split.
    Eval(EvalArgs),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// JSON Lines manifest with audio paths.
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Synthetic corpus spec (JSON) to generate instead.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Paragraph count for synthetic generation.
    #[arg(long, default_value_t = 200)]
    paragraphs: usize,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Silence-trim threshold in dBFS.
    #[arg(long, default_value_t = -40.0)]
    threshold_db: f64,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding cache file to create or extend.
    #[arg(long)]
    cache: PathBuf,
    /// stub or pretrained:<name>
    #[arg(long, default_value = "stub")]
    backend: String,
    /// Embedding width d_e.
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    context_width: usize,
    #[arg(long, default_value = "pse")]
    cu_mode: CuMode,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Synthetic corpus spec (JSON); the corpus is generated in memory.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    paragraphs: usize,
    /// Run directory: config.json, trace.csv, checkpoints/, reports/.
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long, default_value = "pse")]
    cu_mode: CuMode,
    #[arg(long, default_value_t = 2)]
    context_width: usize,
    /// toy or paper
    #[arg(long, default_value = "toy")]
    scale: String,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "stub")]
    backend: String,
    /// Optional word -> phonemes lexicon file.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    val_size: usize,
    #[arg(long, default_value_t = 100)]
    test_size: usize,
    /// Optional embedding cache to reuse.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inventory JSON written by `train`.
    #[arg(long)]
    inventory: PathBuf,
    /// Manifest holding the paragraph to synthesize from.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    paragraph: String,
    #[arg(long)]
    index: usize,
    /// Output mel path; .wav/.png siblings derive from it.
    #[arg(long)]
    out: PathBuf,
    /// Also reconstruct audio with Griffin-Lim.
    #[arg(long)]
    wav: bool,
    /// Also export a PNG heatmap.
    #[arg(long)]
    png: bool,
    #[arg(long, default_value_t = 400)]
    max_steps: usize,
    #[arg(long, default_value = "stub")]
    backend: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// on or off
    #[arg(long, default_value = "off")]
    dropout_at_inference: String,
    #[arg(long, default_value_t = 30)]
    griffin_lim_iters: usize,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    inventory: PathBuf,
    /// The sentence whose spectrogram is compared across contexts.
    #[arg(long)]
    current: String,
    /// Alternative previous sentences (repeatable).
    #[arg(long = "prev", required = true)]
    prev: Vec<String>,
    /// Directory for per-variant heatmaps (optional).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "stub")]
    backend: String,
    #[arg(long, default_value_t = 400)]
    max_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    inventory: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, or test
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 100)]
    val_size: usize,
    #[arg(long, default_value_t = 100)]
    test_size: usize,
    #[arg(long, default_value = "stub")]
    backend: String,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CResult<()> {
    match cmd {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn make_backend(spec: &str, dim: usize) -> CResult<StubBackend> {
    if spec == "stub" {
        Ok(StubBackend::new(dim))
    } else if let Some(name) = spec.strip_prefix("pretrained:") {
        Err(backend_failure(format!(
            "pretrained backend {name:?} is not available in this build; use --backend stub"
        )))
    } else {
        Err(invalid(format!(
            "unknown backend {spec:?}; expected stub or pretrained:<name>"
        )))
    }
}

fn load_lexicon(path: &Option<PathBuf>) -> CResult<Lexicon> {
    match path {
        Some(p) => Ok(Lexicon::load(p)?),
        None => Ok(Lexicon::new()),
    }
}

fn language_of(entry: Option<&str>) -> Language {
    match entry {
        Some(s) if s.eq_ignore_ascii_case("mandarin") => Language::Mandarin,
        _ => Language::English,
    }
}

fn load_inventory(path: &Path) -> CResult<Inventory> {
    let text = fs::read_to_string(path)?;
    let mut inv: Inventory = serde_json::from_str(&text)?;
    inv.rebuild_index();
    Ok(inv)
}

/// A spec file is either a full `SyntheticSpec` or the `{classes,
/// noise_sigma}` shorthand for the built-in toy spec.
fn load_synthetic_spec(path: &Path) -> CResult<SyntheticSpec> {
    let text = fs::read_to_string(path)?;
    if let Ok(spec) = serde_json::from_str::<SyntheticSpec>(&text) {
        return Ok(spec);
    }
    #[derive(serde::Deserialize)]
    struct ToyShorthand {
        classes: usize,
        noise_sigma: f64,
    }
    let toy: ToyShorthand = serde_json::from_str(&text)?;
    Ok(SyntheticSpec::toy(toy.classes, toy.noise_sigma))
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn cmd_prepare(a: PrepareArgs) -> CResult<()> {
    fs::create_dir_all(&a.outdir)?;
    let mel_dir = a.outdir.join("mel");
    fs::create_dir_all(&mel_dir)?;

    let mut corpus = if let Some(spec_path) = &a.synthetic {
        let spec = load_synthetic_spec(spec_path)?;
        generate_synthetic(&spec, a.paragraphs, a.seed)
    } else if let Some(manifest) = &a.manifest {
        parse_manifest(manifest)?
    } else {
        return Err(invalid("prepare needs --manifest or --synthetic"));
    };

    let keys: Vec<UtteranceKey> = corpus.keys();
    let mut written = 0usize;
    for (pid, idx) in keys {
        let entry = corpus.sentence(&pid, idx)?.clone();
        let mel = if let Some(target) = &entry.target_mel {
            Some(MelSpectrogram {
                data: target.clone(),
                window: 800,
                hop: 200,
                sample_rate: 16_000,
            })
        } else if let Some(audio) = &entry.audio_path {
            let clip = load_audio(audio)?;
            let trimmed = trim_silence(&clip, a.threshold_db);
            if trimmed.all_silence {
                eprintln!("warning: {pid}/{idx} is pure silence; skipped");
                None
            } else {
                Some(mel_spectrogram(&trimmed.clip, &MelParams::default())?)
            }
        } else {
            None
        };
        if let Some(mel) = mel {
            let rel = PathBuf::from("mel").join(format!("{pid}_{idx:04}.mel"));
            save_mel(&mel, &a.outdir.join(&rel))?;
            let slot = corpus.sentence_mut(&pid, idx).expect("key exists");
            slot.mel_path = Some(rel);
            slot.target_mel = Some(mel.data);
            written += 1;
        }
    }
    let manifest_out = a.outdir.join("manifest.jsonl");
    write_manifest(&corpus, &manifest_out)?;
    println!(
        "prepared {} utterances ({} with features) -> {}",
        corpus.num_sentences(),
        written,
        manifest_out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

fn cmd_embed(a: EmbedArgs) -> CResult<()> {
    if a.cu_mode == CuMode::None {
        return Err(invalid("--cu-mode none has no embeddings to precompute"));
    }
    let corpus = parse_manifest(&a.manifest)?;
    let backend = make_backend(&a.backend, a.dim)?;
    let cache = if a.cache.exists() {
        EmbeddingCache::load(&a.cache)?
    } else {
        EmbeddingCache::new(a.dim)
    };
    if cache.dim() != a.dim {
        return Err(invalid(format!(
            "cache holds {}-d vectors but --dim is {}",
            cache.dim(),
            a.dim
        )));
    }
    let tokenizer = WhitespaceTokenizer::new();
    for (pid, idx) in corpus.keys() {
        let window = build_window(&corpus, &pid, idx, a.context_width)?;
        match a.cu_mode {
            CuMode::Cse => {
                embed_window_cse(&window, &tokenizer, &backend, Some(&cache))?;
            }
            CuMode::Pse => {
                embed_window_pse(&window, &tokenizer, &backend, Some(&cache))?;
            }
            CuMode::None => unreachable!(),
        }
    }
    if let Some(dir) = a.cache.parent() {
        fs::create_dir_all(dir)?;
    }
    cache.save(&a.cache)?;
    println!(
        "cached {} embeddings ({} sentences) -> {}",
        cache.len(),
        corpus.num_sentences(),
        a.cache.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(a: TrainArgs) -> CResult<()> {
    let lexicon = load_lexicon(&a.lexicon)?;
    let (corpus, inventory) = if let Some(spec_path) = &a.synthetic {
        let spec = load_synthetic_spec(spec_path)?;
        let corpus = generate_synthetic(&spec, a.paragraphs, a.seed);
        (corpus, synthetic_inventory(&spec))
    } else if let Some(manifest) = &a.manifest {
        (parse_manifest(manifest)?, Inventory::from_lexicon(&lexicon))
    } else {
        return Err(invalid("train needs --manifest or --synthetic"));
    };

    let mut model_cfg = match a.scale.as_str() {
        "toy" => ModelConfig::toy(a.cu_mode, inventory.len()),
        "paper" => ModelConfig::paper_scale(a.cu_mode, inventory.len()),
        other => return Err(invalid(format!("unknown scale {other:?}"))),
    };
    model_cfg.context_width = a.context_width;
    if a.cu_mode == CuMode::Pse && 2 * a.context_width > model_cfg.cu_attention.max_pairs {
        model_cfg.cu_attention.max_pairs = 2 * a.context_width;
    }

    let split = split_sized(&corpus, a.seed, a.val_size, a.test_size)?;
    if let Some((_, idx)) = split.train.first() {
        let first = corpus.sentence(&split.train[0].0, *idx)?;
        if let Some(t) = &first.target_mel {
            model_cfg.mel_bins = t.ncols();
        }
    }
    model_cfg.validate()?;

    let backend = make_backend(&a.backend, model_cfg.embed_dim)?;
    let cache = match &a.cache {
        Some(p) if p.exists() => Some(EmbeddingCache::load(p)?),
        Some(_) => Some(EmbeddingCache::new(model_cfg.embed_dim)),
        None => None,
    };
    let tokenizer = WhitespaceTokenizer::new();
    let language = language_of(None);
    let data = build_training_set(
        &corpus,
        &split.train,
        a.cu_mode,
        a.context_width,
        &lexicon,
        language,
        &inventory,
        &tokenizer,
        &backend,
        cache.as_ref(),
    )?;

    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        log_every: 50,
    };
    let mut model = Model::init(model_cfg.clone(), a.seed)?;
    let mut optimizer = Adam::new(a.lr);

    fs::create_dir_all(a.outdir.join("checkpoints"))?;
    fs::create_dir_all(a.outdir.join("reports"))?;
    let run_config = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
        "inventory_units": inventory.len(),
        "train_utterances": data.len(),
    });
    fs::write(
        a.outdir.join("config.json"),
        serde_json::to_string_pretty(&run_config)?,
    )?;
    fs::write(a.outdir.join("inventory.json"), serde_json::to_string(&inventory)?)?;
    fs::write(a.outdir.join("split.json"), serde_json::to_string(&split)?)?;

    let trace = train(&mut model, &mut optimizer, &data, &train_cfg)?;
    let mut csv = String::from("step,loss,mse_pre,mse_post,stop_bce\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.loss, row.mse_pre, row.mse_post, row.stop_bce
        ));
    }
    fs::write(a.outdir.join("trace.csv"), csv)?;

    let ckpt = Checkpoint {
        model,
        optimizer: Some(optimizer),
        step: a.steps,
        seed: a.seed,
    };
    let ckpt_path = a.outdir.join("checkpoints/final.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    if let Some(cache) = &cache {
        if let Some(p) = &a.cache {
            cache.save(p)?;
        }
    }
    let last = trace.last().expect("non-empty trace");
    println!(
        "trained {} steps on {} utterances; final loss {:.6} -> {}",
        a.steps,
        data.len(),
        last.loss,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> CResult<()> {
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    ckpt.model.config.dropout_at_inference = match a.dropout_at_inference.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(invalid(format!("--dropout-at-inference {other:?}"))),
    };
    let inventory = load_inventory(&a.inventory)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let corpus = parse_manifest(&a.manifest)?;
    let entry = corpus.sentence(&a.paragraph, a.index)?;
    let language = language_of(entry.language.as_deref());
    let phonemes = crate::corpus::g2p(&entry.text, &lexicon, language, &inventory)?.ids;
    let backend = make_backend(&a.backend, ckpt.model.config.embed_dim)?;
    let tokenizer = WhitespaceTokenizer::new();
    let window = build_window(&corpus, &a.paragraph, a.index, ckpt.model.config.context_width)?;
    let context = prepare_context(
        &window,
        ckpt.model.config.cu_mode,
        &tokenizer,
        &backend,
        None,
    )?;

    let result = ckpt
        .model
        .synthesize(&phonemes, &context, a.max_steps, a.seed)?;
    if let Some(dir) = a.out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mel = MelSpectrogram {
        data: result.mel.clone(),
        window: 800,
        hop: 200,
        sample_rate: 16_000,
    };
    save_mel(&mel, &a.out)?;
    if a.png {
        save_mel_png(&result.mel, &a.out.with_extension("png"))?;
    }
    if a.wav {
        let clip = griffin_lim(&mel, &MelParams::default(), a.griffin_lim_iters);
        save_wav(&clip, &a.out.with_extension("wav"))?;
    }
    println!(
        "synthesized {} frames{} -> {}",
        result.mel.nrows(),
        if result.no_stop() {
            " (no stop token fired)"
        } else {
            ""
        },
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Build the window "previous sentence -> current sentence" with all other
/// neighbor slots padded.
fn ablation_window(current: &str, prev: &str, context_width: usize) -> SentenceWindow {
    let mut past = vec![(String::new(), true); context_width];
    past[context_width - 1] = (prev.to_string(), false);
    SentenceWindow {
        paragraph_id: "ablation".to_string(),
        center_index: 1,
        center: current.to_string(),
        past,
        future: vec![(String::new(), true); context_width],
        context_width,
    }
}

fn cmd_ablate(a: AblateArgs) -> CResult<()> {
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    // The study compares deterministic outputs, so inference dropout is
    // forced off regardless of how the checkpoint was configured.
    ckpt.model.config.dropout_at_inference = false;
    let model = &ckpt.model;
    let inventory = load_inventory(&a.inventory)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let phonemes =
        crate::corpus::g2p(&a.current, &lexicon, Language::English, &inventory)?.ids;
    let backend = make_backend(&a.backend, model.config.embed_dim)?;
    let tokenizer = WhitespaceTokenizer::new();

    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(a.prev.len());
    for (i, prev) in a.prev.iter().enumerate() {
        let window = ablation_window(&a.current, prev, model.config.context_width);
        let context =
            prepare_context(&window, model.config.cu_mode, &tokenizer, &backend, None)?;
        let result = model.synthesize(&phonemes, &context, a.max_steps, a.seed)?;
        if let Some(dir) = &a.out {
            fs::create_dir_all(dir)?;
            save_mel_png(&result.mel, &dir.join(format!("variant{i}.png")))?;
        }
        outputs.push(result.mel);
    }

    println!("ablation report: {} variants of {:?}", outputs.len(), a.current);
    for i in 0..outputs.len() {
        for j in (i + 1)..outputs.len() {
            let diff = mean_abs_diff(&outputs[i], &outputs[j]);
            println!(
                "  prev[{i}] {:?} vs prev[{j}] {:?}: mean-abs mel diff {:.6}",
                a.prev[i], a.prev[j], diff
            );
        }
    }
    Ok(())
}

/// Mean absolute difference over the overlapping frames, counting frames only
/// one output has at their full magnitude.
pub fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let rows = a.nrows().max(b.nrows());
    let cols = a.ncols().min(b.ncols());
    let mut sum = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let x = if i < a.nrows() { a[[i, j]] } else { 0.0 };
            let y = if i < b.nrows() { b[[i, j]] } else { 0.0 };
            sum += (x - y).abs();
        }
    }
    sum / (rows * cols) as f64
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(a: EvalArgs) -> CResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let inventory = load_inventory(&a.inventory)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let corpus = parse_manifest(&a.manifest)?;
    let split = split_sized(&corpus, a.split_seed, a.val_size, a.test_size)?;
    let keys = match a.split.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => return Err(invalid(format!("unknown split {other:?}"))),
    };
    let backend = make_backend(&a.backend, model.config.embed_dim)?;
    let tokenizer = WhitespaceTokenizer::new();
    let data = build_training_set(
        &corpus,
        keys,
        model.config.cu_mode,
        model.config.context_width,
        &lexicon,
        language_of(None),
        &inventory,
        &tokenizer,
        &backend,
        None,
    )?;
    let tf = teacher_forced_loss(model, &data)?;
    let fr = free_running_mse(model, &data)?;
    println!(
        "eval on {} ({} utterances): teacher-forced loss {:.6}, free-running mel MSE {:.6}",
        a.split,
        data.len(),
        tf,
        fr
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn selftest_attention(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = 50;
    for case in 0..cases {
        let t_len = rng.gen_range(1..=7);
        let n_keys = rng.gen_range(1..=6);
        let dims = AttentionDims {
            heads: rng.gen_range(1..=4),
            query_dim: rng.gen_range(1..=8),
            embed_dim: rng.gen_range(1..=8),
            key_dim: rng.gen_range(1..=8),
            value_dim: rng.gen_range(1..=8),
            context_dim: rng.gen_range(1..=8),
            max_pairs: 8,
        };
        let params = AttentionParams::init(dims, &mut rng);
        let f = Array2::from_shape_fn((t_len, dims.query_dim), |_| rng.gen_range(-1.0..1.0));
        let e = Array2::from_shape_fn((n_keys, dims.embed_dim), |_| rng.gen_range(-1.0..1.0));
        let mut mask: Vec<bool> = (0..n_keys).map(|_| rng.gen_bool(0.8)).collect();
        if mask.iter().all(|&m| !m) {
            mask[0] = true;
        }
        let (got, _) =
            multi_head_cu_attention(&f, &e, Some(&mask), &params).map_err(|e| e.to_string())?;
        let (want, _) = brute_force_attention(&f, &e, Some(&mask), &params);
        let max_abs = got
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if max_abs > 1e-5 {
            return Err(format!("attention case {case}: max abs err {max_abs:.3e}"));
        }
    }
    Ok(cases)
}

fn selftest_gradients(seed: u64) -> Result<f64, String> {
    let cfg = ModelConfig {
        inventory_size: 5,
        phoneme_embed_dim: 6,
        encoder_conv_layers: 2,
        encoder_kernel: 3,
        encoder_dim: 6,
        encoder_dropout: 0.0,
        prenet_dim: 6,
        prenet_dropout: 0.5,
        attention_rnn_dim: 6,
        decoder_rnn_dim: 6,
        attention_dim: 6,
        location_filters: 3,
        location_kernel: 3,
        postnet_channels: 4,
        postnet_kernel: 3,
        postnet_layers: 3,
        mel_bins: 4,
        reduction: 2,
        stop_threshold: 0.5,
        dropout_at_inference: false,
        cu_mode: CuMode::Pse,
        context_width: 2,
        embed_dim: 5,
        cu_attention: AttentionDims {
            heads: 2,
            query_dim: 6,
            embed_dim: 5,
            key_dim: 3,
            value_dim: 3,
            context_dim: 6,
            max_pairs: 8,
        },
        fused_dim: 6,
    };
    let mut model = Model::init(cfg, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
    crate::taco_lite::jitter_params(&mut model, 0.05, seed.wrapping_add(2));
    let context = UtteranceContext::Pse {
        embeddings: Array2::from_shape_fn((4, 5), |(i, j)| 0.15 * i as f64 - 0.1 * j as f64),
        key_mask: vec![true, false, true, true],
    };
    let target = Array2::from_shape_fn((4, 4), |(i, j)| (i as f64 - j as f64) * 0.2);
    let report = gradient_check(&model, &[0, 2, 3], &context, &target, 2, seed, 1e-3)
        .map_err(|e| e.to_string())?;
    if report.passed() {
        Ok(report.max_rel_err)
    } else {
        Err(format!(
            "gradient check failed: {} (max rel err {:.3e})",
            report.worst_coordinate, report.max_rel_err
        ))
    }
}

fn selftest_layout() -> Result<(), String> {
    // Three-sentence paragraph, L=1, center = middle sentence.
    let mut corpus = Corpus::new();
    for text in ["alpha one", "beta two", "gamma three"] {
        corpus.push_sentence(
            "p",
            SentenceEntry {
                text: text.to_string(),
                ..Default::default()
            },
        );
    }
    let window = build_window(&corpus, "p", 1, 1).map_err(|e| e.to_string())?;
    let tokenizer = WhitespaceTokenizer::new();
    let (past, future) = build_cse_chunks(&window, &tokenizer).map_err(|e| e.to_string())?;
    // [CLS] w w [SEP] w w
    for chunk in [&past, &future] {
        if chunk.token_ids.len() != 6 {
            return Err(format!("CSE chunk length {} != 6", chunk.token_ids.len()));
        }
        if chunk.cls_position != 0 || chunk.sep_positions != vec![3] {
            return Err("CSE chunk CLS/SEP positions are wrong".to_string());
        }
        if chunk.token_ids[0] != 101 || chunk.token_ids[3] != 102 {
            return Err("CSE special-token ids are wrong".to_string());
        }
    }
    Ok(())
}

fn selftest_frames(seed: u64) -> Result<(), String> {
    let params = MelParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let n = rng.gen_range(800..40_000);
        let want = 1 + (n - 800) / 200;
        match frame_count(n, &params) {
            Some(got) if got == want => {}
            other => return Err(format!("frame_count({n}) = {other:?}, want {want}")),
        }
    }
    if frame_count(16_000, &params) != Some(77) {
        return Err("frame_count(16000) != 77".to_string());
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> CResult<()> {
    let mut failures = Vec::new();

    match selftest_attention(a.seed) {
        Ok(n) => println!("selftest attention-oracle: ok ({n} cases)"),
        Err(e) => {
            println!("selftest attention-oracle: FAILED ({e})");
            failures.push(e);
        }
    }
    match selftest_gradients(a.seed) {
        Ok(err) => println!("selftest gradient-check: ok (max rel err {err:.3e})"),
        Err(e) => {
            println!("selftest gradient-check: FAILED ({e})");
            failures.push(e);
        }
    }
    match selftest_layout() {
        Ok(()) => println!("selftest chunk-layout: ok"),
        Err(e) => {
            println!("selftest chunk-layout: FAILED ({e})");
            failures.push(e);
        }
    }
    match selftest_frames(a.seed) {
        Ok(()) => println!("selftest frame-count: ok"),
        Err(e) => {
            println!("selftest frame-count: FAILED ({e})");
            failures.push(e);
        }
    }

    if failures.is_empty() {
        println!("selftest: all suites passed");
        Ok(())
    } else {
        Err(invalid(format!("{} selftest suite(s) failed", failures.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("cutts").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run_args(&["frobnicate"]), EXIT_INVALID);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run_args(&["--help"]), EXIT_OK);
    }

    #[test]
    fn pretrained_backend_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(
            &manifest,
            "{\"paragraph_id\":\"p\",\"sentence_index\":0,\"text\":\"hi there\"}\n",
        )
        .unwrap();
        let cache = dir.path().join("cache.bin");
        let code = run_args(&[
            "embed",
            "--manifest",
            manifest.to_str().unwrap(),
            "--cache",
            cache.to_str().unwrap(),
            "--backend",
            "pretrained:bert-base",
        ]);
        assert_eq!(code, EXIT_BACKEND);
    }

    #[test]
    fn missing_manifest_exits_2() {
        let code = run_args(&[
            "embed",
            "--manifest",
            "/nonexistent/m.jsonl",
            "--cache",
            "/tmp/never-written-cache.bin",
        ]);
        assert_eq!(code, EXIT_INVALID);
    }

    #[test]
    fn mean_abs_diff_handles_length_mismatch() {
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((4, 2), 1.0);
        // two missing rows count at full magnitude
        assert!((mean_abs_diff(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(mean_abs_diff(&a, &a), 0.0);
    }
}
