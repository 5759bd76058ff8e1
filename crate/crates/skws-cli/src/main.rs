//! Command-line front end for the keyword-spotting engine: corpus
//! generation, training, DET evaluation, streaming inference, attention-mask
//! inspection, gradient checking, and the latency/memory benchmark.
//!
//! Configuration precedence is flags over config file over built-in
//! defaults; a config file is the same canonical `key=value` text that
//! checkpoints embed. Every subcommand is deterministic under `--seed`
//! (wall-clock columns aside). Exit codes: 0 success, 1 usage error,
//! 2 data or format error, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use skws_core::{
    bench_csv, det_csv, det_sweep, equivalence_report, ft_rate_at_frr, generate_corpus, gradcheck,
    metrics_csv, parse_checkpoint, read_features, read_split, run_bench, save_checkpoint,
    score_corpus, train, vtd_metrics, write_corpus, AttentionMask, AttentionProjections,
    BenchOptions, BlockSpec, CorpusSpec, Error, Matrix, ModelConfig, ModelParams, Precision,
    Result, Scalar, SplitMix64, StreamingSession, TrainOptions,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Relative-error bar a parameter tensor must clear in `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;
/// Equivalence bar for `mask` (the model runs at 64-bit).
const MASK_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(
    name = "skws",
    about = "Streaming keyword-spotting engine: data, training, evaluation, benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args, Clone)]
struct Shared {
    /// Seed for every randomized step.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model config file in canonical key=value form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric precision, overriding the config file or checkpoint.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trigger/confusable/negative corpus.
    GenData(GenDataArgs),
    /// Train the two-branch model and write a checkpoint.
    Train(TrainArgs),
    /// DET-curve evaluation of a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Stream one feature file and print per-frame scores and verdicts.
    Stream(StreamArgs),
    /// Compare streaming and full-pass latency across utterance lengths.
    Bench(BenchArgs),
    /// Print a block attention mask and verify streaming equivalence.
    Mask(MaskArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    shared: Shared,
    /// Output directory for the corpus tree.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_true: usize,
    #[arg(long, default_value_t = 100)]
    n_confusable: usize,
    #[arg(long, default_value_t = 50)]
    n_negative: usize,
    /// Trigger tokens a confusable copies before diverging.
    #[arg(long, default_value_t = 4)]
    divergence_point: usize,
    /// Feature noise around the token prototypes.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV path; omitted prints the CSV to stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Corpus split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Post-trigger context frames (K); omitted uses each utterance in full.
    #[arg(long)]
    post_trigger_frames: Option<i64>,
    /// DET CSV output path; omitted prints the CSV to stdout.
    #[arg(long)]
    det_out: Option<PathBuf>,
    /// Trigger token sequence for the phonetic-branch detection metric.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2, 3])]
    trigger: Vec<usize>,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to stream.
    #[arg(long)]
    features: PathBuf,
    /// Smoothed-score threshold below which a trigger is cancelled.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Frame at which the trigger is declared.
    #[arg(long, default_value_t = 24)]
    trigger_frame: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint to benchmark; omitted times a freshly initialized model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Utterance lengths in frames, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = vec![80, 800])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Report CSV path; omitted prints the CSV to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    shared: Shared,
    /// Block shift S; the block size is 2S.
    #[arg(long, default_value_t = 2)]
    shift: usize,
    /// Sequence length to render.
    #[arg(long, default_value_t = 6)]
    frames: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    shared: Shared,
    /// Frames in the probe utterance.
    #[arg(long, default_value_t = 6)]
    frames: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Stream(args) => run_stream(args),
        Command::Bench(args) => run_bench_cmd(args),
        Command::Mask(args) => run_mask(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

/// Usage errors are bad argument values; file and config troubles are data
/// errors; everything that means the numbers went wrong is numeric.
fn exit_class(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::AllMaskedRow { .. } => {
            EXIT_NUMERIC
        }
        _ => EXIT_DATA,
    }
}

/// Resolve the model config: flags beat the config file, which beats the
/// built-in defaults.
fn resolve_config(shared: &Shared) -> Result<ModelConfig> {
    let mut config = match &shared.config {
        Some(path) => ModelConfig::from_text(&fs::read_to_string(path)?)?,
        None => ModelConfig::default(),
    };
    if let Some(p) = shared.precision {
        config.precision = p.into();
    }
    Ok(config)
}

/// A checkpoint whose compute precision is chosen at load time: the
/// `--precision` flag if given, else the precision recorded in the file.
enum Loaded {
    F32(ModelConfig, ModelParams<f32>),
    F64(ModelConfig, ModelParams<f64>),
}

fn load_model(path: &Path, precision: Option<PrecisionArg>) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    let (config, params) = parse_checkpoint::<f64>(&bytes)?;
    match precision.map(Precision::from).unwrap_or(config.precision) {
        Precision::F64 => Ok(Loaded::F64(config, params)),
        Precision::F32 => {
            let (config, params) = parse_checkpoint::<f32>(&bytes)?;
            Ok(Loaded::F32(config, params))
        }
    }
}

fn write_or_print(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let config = resolve_config(&args.shared)?;
    let spec = CorpusSpec {
        feature_dim: config.feature_dim,
        vocab: config.vocab_size,
        sigma: args.sigma,
        divergence_point: args.divergence_point,
        n_true: args.n_true,
        n_confusable: args.n_confusable,
        n_negative: args.n_negative,
        seed: args.shared.seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    write_corpus(&args.out, &corpus)?;
    for (name, split) in corpus.splits() {
        println!("{name}: {} utterances", split.len());
    }
    println!("corpus written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let config = resolve_config(&args.shared)?;
    match config.precision {
        Precision::F32 => train_with::<f32>(&args, &config),
        Precision::F64 => train_with::<f64>(&args, &config),
    }
}

fn train_with<T: Scalar>(args: &TrainArgs, config: &ModelConfig) -> Result<ExitCode> {
    let utterances = read_split(&args.data, "train", config.vocab_size)?;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        clip_norm: args.clip_norm,
        seed: args.shared.seed,
    };
    let (params, metrics) = train::<T>(config, &utterances, &opts)?;
    save_checkpoint(&args.out, &params, config)?;
    let csv = metrics_csv(&metrics);
    match &args.metrics {
        Some(path) => {
            fs::write(path, &csv)?;
            print_train_summary(&mut std::io::stdout(), utterances.len(), &metrics);
        }
        None => {
            print!("{csv}");
            print_train_summary(&mut std::io::stderr(), utterances.len(), &metrics);
        }
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn print_train_summary(
    sink: &mut dyn Write,
    n_utterances: usize,
    metrics: &[skws_core::EpochMetrics],
) {
    if let Some(last) = metrics.last() {
        let _ = writeln!(
            sink,
            "trained {} epochs on {} utterances: ctc {:.4}, phrase {:.4}, acc {:.3}",
            metrics.len(),
            n_utterances,
            last.ctc_loss,
            last.phrase_loss,
            last.phrase_acc
        );
    }
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    let post = match args.post_trigger_frames {
        Some(k) if k < 0 => {
            return Err(Error::InvalidInput(format!(
                "post-trigger frames must be >= 0, got {k}"
            )))
        }
        Some(k) => k as usize,
        None => usize::MAX,
    };
    match load_model(&args.checkpoint, args.shared.precision)? {
        Loaded::F32(config, params) => eval_with(&args, &config, &params, post),
        Loaded::F64(config, params) => eval_with(&args, &config, &params, post),
    }
}

fn eval_with<T: Scalar>(
    args: &EvalArgs,
    config: &ModelConfig,
    params: &ModelParams<T>,
    post: usize,
) -> Result<ExitCode> {
    if args.trigger.iter().any(|&t| t >= config.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "trigger tokens must be below the vocabulary size {}",
            config.vocab_size
        )));
    }
    let utterances = read_split(&args.data, &args.split, config.vocab_size)?;
    let scored = score_corpus(params, config, &utterances, post)?;
    let points = det_sweep(&scored)?;
    let vtd = vtd_metrics(&scored, &args.trigger)?;
    let positives = scored.iter().filter(|s| s.phrase_true).count();

    write_or_print(&args.det_out, &det_csv(&points))?;
    // Keep stdout clean when it carries the CSV.
    let mut sink: Box<dyn Write> = match args.det_out {
        Some(_) => Box::new(std::io::stdout()),
        None => Box::new(std::io::stderr()),
    };
    let _ = writeln!(
        sink,
        "utterances: {} ({} true, {} negative)",
        scored.len(),
        positives,
        scored.len() - positives
    );
    let _ = writeln!(
        sink,
        "false-trigger rate at FRR <= 1%: {:.4}",
        ft_rate_at_frr(&points, 0.01)
    );
    let _ = writeln!(
        sink,
        "vtd decode accuracy: {:.4} ({}/{})",
        vtd.accuracy, vtd.correct, vtd.utterances
    );
    // The false-alarm axis is a rate over the negative set, not FAs per
    // hour: the synthetic corpus has no audio-time denominator.
    let _ = writeln!(sink, "fa axis: false-trigger rate over the negative set");
    Ok(ExitCode::SUCCESS)
}

fn run_stream(args: StreamArgs) -> Result<ExitCode> {
    if !args.threshold.is_finite() || args.threshold < 0.0 {
        return Err(Error::InvalidInput(format!(
            "threshold must be finite and >= 0, got {}",
            args.threshold
        )));
    }
    match load_model(&args.checkpoint, args.shared.precision)? {
        Loaded::F32(config, params) => stream_with(&args, &config, &params),
        Loaded::F64(config, params) => stream_with(&args, &config, &params),
    }
}

fn stream_with<T: Scalar>(
    args: &StreamArgs,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<ExitCode> {
    let features = read_features(&args.features)?;
    if features.cols() != config.feature_dim {
        return Err(Error::InvalidInput(format!(
            "feature file has {} columns, model expects {}",
            features.cols(),
            config.feature_dim
        )));
    }
    let mut session = StreamingSession::new(params, config)?;
    session.apply_policy(args.threshold, args.trigger_frame);
    let mut emissions = session.push(&features.cast::<T>())?;
    emissions.extend(session.finish()?);

    println!("frame_idx, phrase_pos_prob, smoothed_score, verdict");
    for e in &emissions {
        println!(
            "{}, {:.6}, {:.6}, {}",
            e.frame_idx,
            e.decision.pos_prob,
            e.decision.smoothed,
            e.decision.verdict.label()
        );
    }
    eprintln!("final verdict: {}", session.decision().label());
    Ok(ExitCode::SUCCESS)
}

fn run_bench_cmd(args: BenchArgs) -> Result<ExitCode> {
    match &args.checkpoint {
        Some(path) => match load_model(path, args.shared.precision)? {
            Loaded::F32(config, params) => bench_with(&args, &config, &params),
            Loaded::F64(config, params) => bench_with(&args, &config, &params),
        },
        None => {
            let config = resolve_config(&args.shared)?;
            match config.precision {
                Precision::F32 => {
                    let params =
                        ModelParams::<f32>::init(&config, &mut SplitMix64::new(args.shared.seed))?;
                    bench_with(&args, &config, &params)
                }
                Precision::F64 => {
                    let params =
                        ModelParams::<f64>::init(&config, &mut SplitMix64::new(args.shared.seed))?;
                    bench_with(&args, &config, &params)
                }
            }
        }
    }
}

fn bench_with<T: Scalar>(
    args: &BenchArgs,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<ExitCode> {
    let opts = BenchOptions {
        lengths: args.lengths.clone(),
        repeats: args.repeats,
        seed: args.shared.seed,
    };
    let rows = run_bench(params, config, &opts)?;
    write_or_print(&args.out, &bench_csv(&rows))?;
    Ok(ExitCode::SUCCESS)
}

fn run_mask(args: MaskArgs) -> Result<ExitCode> {
    if args.frames == 0 {
        return Err(Error::InvalidInput("frames must be >= 1".into()));
    }
    let spec = BlockSpec::new(args.shift)
        .map_err(|_| Error::InvalidInput("shift must be >= 1".into()))?;
    let mask = AttentionMask::build(args.frames, spec);
    print!("{}", mask.render());

    // Equivalence between the masked full pass and iterative streaming on a
    // random 64-bit attention layer over the same geometry.
    let rng = SplitMix64::new(args.shared.seed);
    let d_model = 8;
    let proj = AttentionProjections::<f64>::random(d_model, 2, &mut rng.fork(0))?;
    let mut input_rng = rng.fork(1);
    let x = Matrix::from_fn(args.frames, d_model, |_, _| input_rng.uniform(-1.0, 1.0));
    let diff = equivalence_report(&x, &proj, spec)?;
    println!("streaming equivalence max abs diff: {diff:.3e}");
    if diff < MASK_TOL {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("equivalence diff exceeds {MASK_TOL:e}");
        Ok(ExitCode::from(EXIT_NUMERIC))
    }
}

fn run_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    if args.frames == 0 {
        return Err(Error::InvalidInput("frames must be >= 1".into()));
    }
    let config = resolve_config(&args.shared)?;
    let entries = gradcheck(&config, args.frames, args.shared.seed)?;
    let mut worst = 0.0f64;
    for e in &entries {
        println!(
            "{:<24} max rel err {:.3e} over {} entries",
            e.name, e.max_rel_err, e.entries
        );
        worst = worst.max(e.max_rel_err);
    }
    if worst < GRADCHECK_TOL {
        println!("gradient check passed: {} tensors", entries.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: worst rel err {worst:.3e} >= {GRADCHECK_TOL:e}");
        Ok(ExitCode::from(EXIT_NUMERIC))
    }
}
