use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use logitshield_core::bench::DEFAULT_GAMMAS;
use logitshield_core::decode::{DEFAULT_MAX_NEW_TOKENS, DEFAULT_STEER_LAYER, DEFAULT_TOP_K};
use logitshield_core::lens::DEFAULT_LAYER_START;

mod commands;
mod svg;

#[derive(Debug, Parser)]
#[command(name = "logitshield", version, about = "Logit-layer debiasing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer divergence trajectories and critical layers.
    Lens(LensArgs),
    /// Generate continuations for dataset samples.
    Decode(DecodeArgs),
    /// Score a dataset and write the report CSV.
    Eval(EvalArgs),
    /// Sweep γ for one or more methods and write the dose-response CSV.
    Sweep(SweepArgs),
    /// Write a toy model, a matching dataset and its ground truth.
    MakeToy(MakeToyArgs),
    /// Serve a model over the line-delimited JSON protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// `toy:<spec.json>`, `exec:<command>` or `tcp:<host:port>`.
    #[arg(long)]
    model: String,
}

#[derive(Debug, Args)]
struct InterventionArgs {
    /// none, static, dynamic or repe-baseline.
    #[arg(long, default_value = "none")]
    method: String,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_LAYER_START)]
    layer_start: usize,
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    max_new_tokens: usize,
    /// Comma-separated token ids that end generation.
    #[arg(long, value_delimiter = ',')]
    stop_tokens: Vec<usize>,
    /// Token vectors for relevance: unembedding or input-embedding.
    #[arg(long, default_value = "unembedding")]
    token_vectors: String,
    /// Layer at which the steering baseline shifts hidden states.
    #[arg(long, default_value_t = DEFAULT_STEER_LAYER)]
    steer_layer: usize,
    /// Dataset used to build the steering vector (defaults to --data).
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LensArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Only analyze this sample id.
    #[arg(long)]
    sample: Option<String>,
    /// contrast (biased vs pure) or choice (stereotype vs anti-stereotype option).
    #[arg(long, default_value = "contrast")]
    mode: String,
    #[arg(long, default_value_t = DEFAULT_LAYER_START)]
    layer_start: usize,
    /// Trajectory CSV; `{id}` is replaced by the sample id. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG line chart of all trajectories.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sample: Option<String>,
    #[command(flatten)]
    intervention: InterventionArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the context from every prompt.
    #[arg(long)]
    no_context: bool,
    /// JSON-lines intervention log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    intervention: InterventionArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    no_context: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report CSV. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-category CSV.
    #[arg(long)]
    categories: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    intervention: InterventionArgs,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "static,dynamic")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAMMAS)]
    gammas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also emit with-context and no-context rows.
    #[arg(long)]
    baselines: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dose-response CSV. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MakeToyArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    #[arg(long, default_value_t = 24)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 16)]
    inject_layer: usize,
    #[arg(long, default_value_t = 2.0)]
    bias_strength: f64,
    #[arg(long, default_value_t = 0.2)]
    effect_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
    #[arg(long, default_value_t = 12)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Listen on a TCP address instead of stdio.
    #[arg(long)]
    listen: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOGITSHIELD_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Lens(a) => commands::lens(a),
        Command::Decode(a) => commands::decode(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::MakeToy(a) => commands::make_toy(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
