//! `l1pc`: cost analysis, toy checkpoints, first-layer transform and verification.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "l1pc", version, about = "First-layer precompute for RoPE transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the read/memory cost model for a preset or config file.
    Analyze(AnalyzeArgs),
    /// Write a seeded random toy checkpoint.
    GenToy(GenToyArgs),
    /// Precompute the first layer of a checkpoint.
    Transform(TransformArgs),
    /// Compare baseline and transformed logits on seeded prompts.
    Verify(VerifyArgs),
    /// Greedy decoding from a prompt.
    Run(RunArgs),
    /// Wall-time and metered-read comparison of decode steps.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// pythia-6.9b, mistral-7b, mixtral-8x7b, mixtral-8x7b-parallel, or all.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    /// JSON model config file.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 16, 256, 1024])]
    batches: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Compare against the embedded reference values; exit 1 on mismatch.
    #[arg(long)]
    paper_check: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PosArg {
    Rope,
    Absolute,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Rmsnorm,
    Layernorm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FfnArg {
    Mlp2,
    Swiglu,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ActArg {
    Gelu,
    Silu,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 97)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    experts: usize,
    /// Defaults to min(2, experts).
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum, default_value_t = LayoutArg::Parallel)]
    layout: LayoutArg,
    #[arg(long, value_enum, default_value_t = PosArg::Rope)]
    pos: PosArg,
    #[arg(long, value_enum, default_value_t = NormArg::Rmsnorm)]
    norm: NormArg,
    #[arg(long, value_enum, default_value_t = FfnArg::Mlp2)]
    ffn: FfnArg,
    #[arg(long, value_enum, default_value_t = ActArg::Silu)]
    activation: ActArg,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_base: f64,
}

#[derive(Debug, Args)]
struct TransformArgs {
    #[arg(long = "in")]
    input: std::path::PathBuf,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    baseline: std::path::PathBuf,
    #[arg(long)]
    transformed: std::path::PathBuf,
    #[arg(long, default_value_t = 100)]
    prompts: usize,
    /// Maximum prompt length; lengths are drawn from 1..=len.
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long)]
    tokens: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Print per-step metered first-layer reads.
    #[arg(long)]
    meter: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    baseline: std::path::PathBuf,
    #[arg(long)]
    transformed: std::path::PathBuf,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::GenToy(a) => commands::gen_toy(a),
        Command::Transform(a) => commands::transform(a),
        Command::Verify(a) => commands::verify(a),
        Command::Run(a) => commands::run(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(outcome) => ExitCode::from(outcome as u8),
        Err(err) => {
            eprintln!("error: {}", commands::describe(&err));
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}
