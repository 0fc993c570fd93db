//! `imvalign`: corpus generation, training, evaluation, timing and
//! alignment plots for the single-step transducer.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imvalign_core::bench::{benchmark_inference, linear_fit, predictor_stage_seconds, DEFAULT_FRAME_SHIFT};
use imvalign_core::checkpoint;
use imvalign_core::data::{
    format_record, generate, load_vocab, read_corpus, write_corpus, PrototypeKind, SynthTaskConfig,
    TranscriptionExample, Vocab,
};
use imvalign_core::eval::{evaluate_corpus, ClassMap, DecodeMode};
use imvalign_core::model::{InferOptions, Model, ModelConfig};
use imvalign_core::par::Parallelism;
use imvalign_core::predictor::PredictorConfig;
use imvalign_core::train::{TrainConfig, Trainer};
use imvalign_core::viz::{matrix_to_text, render_svg, Panel};
use imvalign_core::{Error, Real, Tensor};

use config::Settings;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::Config(_)
            | Error::Incompatible(_)
            | Error::Index { .. }
            | Error::UnknownToken(_)
            | Error::DuplicateToken(_)
            | Error::Unmapped(_) => true,
            Error::Io(io) => matches!(
                io.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ),
            _ => false,
        };
        Self {
            code: if usage { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "imvalign", version, about = "Single-step non-autoregressive transducer on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode a corpus and print error rates.
    Eval(EvalArgs),
    /// Time the inference stages.
    Bench(BenchArgs),
    /// Render reconstructed attention for one utterance as SVG.
    AlignViz(VizArgs),
}

#[derive(Args)]
struct Common {
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    tokens_min: Option<usize>,
    #[arg(long)]
    tokens_max: Option<usize>,
    /// Fewest frames per token.
    #[arg(long, visible_alias = "r-min")]
    frames_min: Option<usize>,
    /// Most frames per token.
    #[arg(long, visible_alias = "r-max")]
    frames_max: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Unit-vector prototypes instead of Gaussian ones.
    #[arg(long)]
    one_hot: bool,
    /// Never repeat a token in adjacent positions.
    #[arg(long)]
    distinct_adjacent: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    examples: Option<usize>,
    /// Index of the first example; disjoint ranges give disjoint splits.
    #[arg(long)]
    first: Option<usize>,
    /// Also write the synthetic token names, one per line.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total updates, counting those already in a resumed checkpoint.
    #[arg(long)]
    steps: Option<u64>,
    /// Save and stop after this many updates, keeping the `--steps` schedule.
    #[arg(long)]
    stop_at: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    clip: Option<f64>,
    /// desk, base or large.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    text_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    predictor_channels: Option<usize>,
    /// Weight of the alignment-prediction loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma_init: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Vocabulary size; defaults to the vocab file or the largest corpus id + 1.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Continue from this checkpoint, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// baseline or oracle.
    #[arg(long)]
    mode: Option<String>,
    /// Lines of `token<TAB>class`.
    #[arg(long)]
    class_map: Option<PathBuf>,
    /// Token names for the class map; defaults to `tok0, tok1, ...`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Append a one-line JSON summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    task: TaskArgs,
    /// Defaults to an untrained desk model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to a generated corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Seconds of audio per frame.
    #[arg(long)]
    frame_shift: Option<f64>,
    /// Also time the predictor stage over a grid of input lengths.
    #[arg(long)]
    scaling: bool,
    /// Comma-separated frame counts for `--scaling`.
    #[arg(long)]
    grid: Option<String>,
    /// Output length for `--scaling`.
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    /// SVG path; matrices go next to it as `<stem>.<panel>.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add the generator's attention as a third panel.
    #[arg(long)]
    generator: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::AlignViz(a) => cmd_align_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parallelism(s: &Settings, flag: bool) -> CliResult<Parallelism> {
    Ok(if s.switch("sequential", flag)? {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    })
}

fn required<T: std::str::FromStr>(s: &Settings, key: &str, flag: Option<T>) -> CliResult<T> {
    s.get_opt(key, flag)?
        .ok_or_else(|| CliError::usage(format!("--{} is required", key.replace('_', "-"))))
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn task_config(s: &Settings, a: TaskArgs, seed: u64) -> CliResult<SynthTaskConfig> {
    let d = SynthTaskConfig::default();
    let one_hot = s.switch("one_hot", a.one_hot)?;
    let cfg = SynthTaskConfig {
        vocab_size: s.get("vocab_size", a.vocab_size, d.vocab_size)?,
        feature_dim: s.get("feature_dim", a.feature_dim, d.feature_dim)?,
        tokens_min: s.get("tokens_min", a.tokens_min, d.tokens_min)?,
        tokens_max: s.get("tokens_max", a.tokens_max, d.tokens_max)?,
        frames_min: s.get("frames_min", a.frames_min, d.frames_min)?,
        frames_max: s.get("frames_max", a.frames_max, d.frames_max)?,
        noise_std: s.get("noise_std", a.noise_std, d.noise_std)?,
        prototypes: if one_hot { PrototypeKind::OneHot } else { PrototypeKind::Gaussian },
        distinct_adjacent: s.switch("distinct_adjacent", a.distinct_adjacent)?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_labeled_corpus(path: PathBuf) -> CliResult<Vec<TranscriptionExample>> {
    let path = existing(path, "corpus")?;
    Ok(read_corpus(&path)?)
}

fn mean(xs: impl Iterator<Item = usize>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<usize>() as f64 / n as f64
    }
}

// ----------------------------------------------------------------------- gen

fn cmd_gen(a: GenArgs) -> CliResult {
    let s = Settings::load(a.common.config.as_deref())?;
    let seed = s.seed(a.common.seed)?;
    let mode = parallelism(&s, a.common.sequential)?;
    let out: PathBuf = required(&s, "out", a.out)?;
    let count = s.get("examples", a.examples, 100usize)?;
    let first = s.get("first", a.first, 0usize)?;
    let vocab_out: Option<PathBuf> = s.get_opt("vocab_out", a.vocab_out)?;
    let task = task_config(&s, a.task, seed)?;
    s.finish()?;

    let corpus = generate(&task, first, count, mode)?;
    write_corpus(&out, &corpus)?;
    if let Some(p) = vocab_out {
        Vocab::synthetic(task.vocab_size).save(p)?;
    }
    println!("examples\t{}", corpus.len());
    println!("mean_frames\t{:.3}", mean(corpus.iter().map(|e| e.frames()), corpus.len()));
    println!("mean_tokens\t{:.3}", mean(corpus.iter().map(|e| e.tokens.len()), corpus.len()));
    Ok(())
}

// --------------------------------------------------------------------- train

fn model_config(s: &Settings, a: &TrainArgs, feature_dim: usize, vocab_size: usize, seed: u64) -> CliResult<ModelConfig> {
    let size: String = s.get("size", a.size.clone(), "desk".into())?;
    let mut c = match size.as_str() {
        "desk" => ModelConfig::desk(feature_dim, vocab_size),
        "base" => ModelConfig::base(feature_dim, vocab_size),
        "large" => ModelConfig::large(feature_dim, vocab_size),
        other => return Err(CliError::usage(format!("unknown size {other:?} (desk|base|large)"))),
    };
    if let Some(dim) = s.get_opt("dim", a.dim)? {
        c.dim = dim;
        c.ffn_dim = 4 * dim;
        c.predictor = PredictorConfig::new(dim);
    }
    c.heads = s.get("heads", a.heads, c.heads)?;
    c.ffn_dim = s.get("ffn_dim", a.ffn_dim, c.ffn_dim)?;
    c.encoder_layers = s.get("encoder_layers", a.encoder_layers, c.encoder_layers)?;
    c.text_encoder_layers = s.get("text_layers", a.text_layers, c.text_encoder_layers)?;
    c.decoder_layers = s.get("decoder_layers", a.decoder_layers, c.decoder_layers)?;
    c.predictor.hidden_channels = s.get("predictor_channels", a.predictor_channels, c.predictor.hidden_channels)?;
    c.lambda = s.get("lambda", a.lambda, c.lambda)?;
    c.sigma_init = s.get("sigma_init", a.sigma_init, c.sigma_init)?;
    c.label_smoothing = s.get("label_smoothing", a.label_smoothing, c.label_smoothing)?;
    c.seed = seed;
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let s = Settings::load(a.common.config.as_deref())?;
    let seed = s.seed(a.common.seed)?;
    let mode = parallelism(&s, a.common.sequential)?;
    let corpus_path: PathBuf = required(&s, "corpus", a.corpus.clone())?;
    let out: PathBuf = required(&s, "out", a.out.clone())?;
    let steps = s.get("steps", a.steps, 1000u64)?;
    let stop_at = s.get("stop_at", a.stop_at, steps)?;
    if stop_at > steps {
        return Err(CliError::usage(format!("--stop-at {stop_at} is past --steps {steps}")));
    }
    let resume: Option<PathBuf> = s.get_opt("resume", a.resume.clone())?;
    let precision: String = s.get("precision", a.precision.clone(), "f32".into())?;
    let log_every = s.get("log_every", a.log_every, 50u64)?.max(1);
    let vocab_file: Option<PathBuf> = s.get_opt("vocab", a.vocab.clone())?;
    let vocab_flag = s.get_opt("vocab_size", a.vocab_size)?;

    let mut train = TrainConfig::recipe(steps);
    train.batch_size = s.get("batch_size", a.batch_size, train.batch_size)?;
    let o = &mut train.optimizer;
    o.lr = s.get("lr", a.lr, o.lr)?;
    o.warmup_steps = s.get("warmup", a.warmup, o.warmup_steps)?;
    o.weight_decay = s.get("weight_decay", a.weight_decay, o.weight_decay)?;
    let clip = s.get("clip", a.clip, o.clip_norm.unwrap_or(0.0))?;
    o.clip_norm = (clip > 0.0).then_some(clip);
    train.seed = seed;
    train.parallelism = mode;
    train.validate()?;

    let corpus = read_labeled_corpus(corpus_path)?;
    if corpus.is_empty() {
        return Err(CliError::usage("cannot train on an empty corpus"));
    }
    if let Some(i) = corpus.iter().position(|e| !e.is_labeled()) {
        return Err(CliError::usage(format!("example {i} has no transcription")));
    }
    let feature_dim = corpus[0].features.cols();
    let corpus_vocab = corpus.iter().flat_map(|e| e.tokens.iter()).max().map_or(1, |m| m + 1);
    let vocab_size = match (vocab_flag, vocab_file) {
        (Some(v), _) => v,
        (None, Some(p)) => load_vocab(existing(p, "vocab")?)?.len(),
        (None, None) => corpus_vocab,
    };
    if corpus_vocab > vocab_size {
        return Err(CliError::usage(format!(
            "corpus uses token id {} but the vocabulary has {vocab_size} entries",
            corpus_vocab - 1
        )));
    }
    let model_cfg = model_config(&s, &a, feature_dim, vocab_size, seed)?;
    s.finish()?;

    match (precision.as_str(), resume) {
        ("f32", None) => train_fresh::<f32>(model_cfg, train, &corpus, stop_at, log_every, &out),
        ("f64", None) => train_fresh::<f64>(model_cfg, train, &corpus, stop_at, log_every, &out),
        (_, Some(ckpt)) if precision == "f32" || precision == "f64" => {
            let ckpt = existing(ckpt, "checkpoint")?;
            match checkpoint::stored_dtype(&ckpt)?.as_str() {
                "f32" => train_resumed::<f32>(&ckpt, train, &corpus, stop_at, log_every, &out),
                "f64" => train_resumed::<f64>(&ckpt, train, &corpus, stop_at, log_every, &out),
                other => Err(CliError::runtime(format!("checkpoint has unsupported dtype {other:?}"))),
            }
        }
        (other, _) => Err(CliError::usage(format!("unknown precision {other:?} (f32|f64)"))),
    }
}

fn train_fresh<T: Real>(
    model_cfg: ModelConfig,
    train: TrainConfig,
    corpus: &[TranscriptionExample],
    steps: u64,
    log_every: u64,
    out: &Path,
) -> CliResult {
    let trainer = Trainer::new(Model::<T>::new(model_cfg)?, train)?;
    run_training(trainer, corpus, steps, log_every, out)
}

fn train_resumed<T: Real>(
    ckpt: &Path,
    mut train: TrainConfig,
    corpus: &[TranscriptionExample],
    steps: u64,
    log_every: u64,
    out: &Path,
) -> CliResult {
    let loaded = checkpoint::load::<T>(ckpt)?;
    let optimizer = loaded
        .optimizer
        .ok_or_else(|| CliError::usage(format!("{} has no optimizer state to resume", ckpt.display())))?;
    train.optimizer = optimizer.config.clone();
    if corpus[0].features.cols() != loaded.model.config.feature_dim {
        return Err(CliError::usage("corpus feature dimension differs from the checkpoint"));
    }
    let trainer = Trainer::resume(loaded.model, optimizer, train)?;
    run_training(trainer, corpus, steps, log_every, out)
}

fn run_training<T: Real>(
    mut trainer: Trainer<T>,
    corpus: &[TranscriptionExample],
    steps: u64,
    log_every: u64,
    out: &Path,
) -> CliResult {
    if let Some(&t) = corpus.iter().flat_map(|e| e.tokens.iter()).find(|&&t| t >= trainer.model.config.vocab_size) {
        return Err(CliError::usage(format!("corpus token {t} is outside the model vocabulary")));
    }
    let start = trainer.steps_done();
    for _ in start..steps {
        let log = match trainer.step(corpus) {
            Ok(log) => log,
            Err(Error::NonFiniteLoss { example }) => {
                eprintln!("non-finite loss at step {}; offending example {example}:", trainer.steps_done() + 1);
                eprint!("{}", format_record(&corpus[example]));
                return Err(CliError::runtime(format!("non-finite loss in example {example}")));
            }
            Err(e) => return Err(e.into()),
        };
        if log.step % log_every == 0 || log.step == steps {
            println!(
                "step\t{}\tloss_total\t{:.6}\tloss_ce\t{:.6}\tloss_mse\t{:.6}\tsigma\t{:.4}\tskipped\t{}",
                log.step, log.loss_total, log.loss_ce, log.loss_mse, log.sigma, log.skipped
            );
        }
    }
    checkpoint::save(out, &trainer.model, Some(&trainer.optimizer))?;
    println!("checkpoint\t{}", out.display());
    println!("steps\t{}", trainer.steps_done());
    Ok(())
}

// ------------------------------------------------------------ model loading

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_model(path: PathBuf) -> CliResult<AnyModel> {
    let path = existing(path, "checkpoint")?;
    match checkpoint::stored_dtype(&path)?.as_str() {
        "f32" => Ok(AnyModel::F32(checkpoint::load::<f32>(&path)?.model)),
        "f64" => Ok(AnyModel::F64(checkpoint::load::<f64>(&path)?.model)),
        other => Err(CliError::runtime(format!("checkpoint has unsupported dtype {other:?}"))),
    }
}

macro_rules! with_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

// ---------------------------------------------------------------------- eval

fn cmd_eval(a: EvalArgs) -> CliResult {
    let s = Settings::load(a.common.config.as_deref())?;
    s.seed(a.common.seed)?;
    let par = parallelism(&s, a.common.sequential)?;
    let ckpt: PathBuf = required(&s, "checkpoint", a.checkpoint)?;
    let corpus: PathBuf = required(&s, "corpus", a.corpus)?;
    let mode: DecodeMode = s.get("mode", a.mode, "baseline".into())?.parse::<DecodeMode>()?;
    let class_map: Option<PathBuf> = s.get_opt("class_map", a.class_map)?;
    let vocab: Option<PathBuf> = s.get_opt("vocab", a.vocab)?;
    let json = s.switch("json", a.json)?;
    s.finish()?;

    let model = load_model(ckpt)?;
    let corpus = read_labeled_corpus(corpus)?;
    let vocab_size = with_model!(&model, m => m.config.vocab_size);
    let map = match class_map {
        None => None,
        Some(p) => {
            let vocab = match vocab {
                Some(v) => load_vocab(existing(v, "vocab")?)?,
                None => Vocab::synthetic(vocab_size),
            };
            Some(ClassMap::load(existing(p, "class map")?, &vocab)?)
        }
    };
    let report = with_model!(&model, m => evaluate_corpus(m, &corpus, mode, map.as_ref(), par)?);
    print!("{}", report.to_kv());
    if json {
        let rate = |r: &imvalign_core::eval::ScoreReport| r.error_rate().ok();
        let summary = serde_json::json!({
            "mode": report.mode.to_string(),
            "utterances": report.utterances,
            "ref_tokens": report.score.ref_tokens,
            "errors": report.score.errors(),
            "error_rate": rate(&report.score),
            "length_within_one": report.length_within_one,
            "degenerate": report.degenerate,
            "class_error_rate": report.class_score.as_ref().and_then(rate),
        });
        println!("{summary}");
    }
    Ok(())
}

// --------------------------------------------------------------------- bench

fn parse_grid(text: &str) -> CliResult<Vec<usize>> {
    let grid = text
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::usage(format!("bad frame grid {text:?}")))?;
    if grid.len() < 2 || grid.contains(&0) {
        return Err(CliError::usage("the frame grid needs at least two positive entries"));
    }
    Ok(grid)
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let s = Settings::load(a.common.config.as_deref())?;
    let seed = s.seed(a.common.seed)?;
    let par = parallelism(&s, a.common.sequential)?;
    let ckpt: Option<PathBuf> = s.get_opt("checkpoint", a.checkpoint)?;
    let corpus_path: Option<PathBuf> = s.get_opt("corpus", a.corpus)?;
    let examples = s.get("examples", a.examples, 20usize)?;
    let repeats = s.get("repeats", a.repeats, 5usize)?;
    let frame_shift = s.get("frame_shift", a.frame_shift, DEFAULT_FRAME_SHIFT)?;
    let scaling = s.switch("scaling", a.scaling)?;
    let grid = parse_grid(&s.get("grid", a.grid, "50,100,200,400,800".to_string())?)?;
    let length = s.get("length", a.length, 10usize)?;
    let task = task_config(&s, a.task, seed)?;
    s.finish()?;
    if repeats < 3 {
        return Err(CliError::usage(format!("--repeats must be at least 3, got {repeats}")));
    }
    if !(frame_shift > 0.0) {
        return Err(CliError::usage("--frame-shift must be positive"));
    }
    if length == 0 {
        return Err(CliError::usage("--length must be at least 1"));
    }

    let model = match ckpt {
        Some(p) => load_model(p)?,
        None => {
            let mut c = ModelConfig::desk(task.feature_dim, task.vocab_size);
            c.seed = seed;
            AnyModel::F32(Model::new(c)?)
        }
    };
    let corpus = match corpus_path {
        Some(p) => read_labeled_corpus(p)?,
        None => generate(&task, 0, examples, par)?,
    };
    let report = with_model!(&model, m => benchmark_inference(m, &corpus, repeats, frame_shift)?);
    print!("{}", report.to_kv());
    if scaling {
        let mut secs = Vec::with_capacity(grid.len());
        let mut out = String::new();
        for &t in &grid {
            let v = with_model!(&model, m => predictor_stage_seconds(m, t, length, repeats, seed)?);
            let _ = writeln!(out, "predictor_s_t{t}\t{v:.6}");
            secs.push(v);
        }
        let xs: Vec<f64> = grid.iter().map(|&t| t as f64).collect();
        let fit = linear_fit(&xs, &secs);
        print!("{out}");
        println!("scaling_length\t{length}");
        println!("scaling_slope_s_per_frame\t{:.3e}", fit.slope);
        println!("scaling_intercept_s\t{:.3e}", fit.intercept);
        println!("scaling_correlation\t{:.4}", fit.correlation);
    }
    Ok(())
}

// ----------------------------------------------------------------- align-viz

fn sidecar(svg: &Path, panel: &str) -> PathBuf {
    let stem = svg.file_stem().map_or_else(|| "align".into(), |s| s.to_string_lossy().into_owned());
    svg.with_file_name(format!("{stem}.{panel}.txt"))
}

fn viz_panels<T: Real>(model: &Model<T>, ex: &TranscriptionExample, generator: bool) -> CliResult<Vec<(String, Tensor<f64>)>> {
    let base = model.infer_with(&ex.features, &InferOptions::default(), None)?;
    let mut panels = vec![(
        format!("baseline (L* = {})", base.hypothesis.length),
        base.alpha_hat.cast::<f64>(),
    )];
    if ex.is_labeled() {
        let oracle = model.infer_oracle_trace(ex)?;
        panels.push((format!("oracle (L = {})", ex.tokens.len()), oracle.alpha_hat.cast()));
        if generator {
            if let Some(alpha) = oracle.generator_alpha {
                panels.push(("generator".into(), alpha.cast()));
            }
        }
    } else if generator {
        return Err(CliError::usage("the generator panel needs a transcribed example"));
    }
    Ok(panels)
}

fn cmd_align_viz(a: VizArgs) -> CliResult {
    let s = Settings::load(a.common.config.as_deref())?;
    s.seed(a.common.seed)?;
    parallelism(&s, a.common.sequential)?;
    let ckpt: PathBuf = required(&s, "checkpoint", a.checkpoint)?;
    let corpus: PathBuf = required(&s, "corpus", a.corpus)?;
    let index = s.get("index", a.index, 0usize)?;
    let out: PathBuf = required(&s, "out", a.out)?;
    let generator = s.switch("generator", a.generator)?;
    s.finish()?;

    let model = load_model(ckpt)?;
    let corpus = read_labeled_corpus(corpus)?;
    let ex = corpus.get(index).ok_or_else(|| {
        CliError::usage(format!("index {index} out of range (corpus has {} examples)", corpus.len()))
    })?;
    let panels = with_model!(&model, m => viz_panels(m, ex, generator)?);
    let mut rendered = Vec::with_capacity(panels.len());
    for (title, matrix) in panels {
        let key = title.split_whitespace().next().unwrap_or("panel").to_string();
        let path = sidecar(&out, &key);
        std::fs::write(&path, matrix_to_text(&matrix)).map_err(Error::from)?;
        println!("matrix\t{}", path.display());
        rendered.push(Panel::new(title, matrix)?);
    }
    std::fs::write(&out, render_svg(&rendered)).map_err(Error::from)?;
    println!("svg\t{}", out.display());
    Ok(())
}
