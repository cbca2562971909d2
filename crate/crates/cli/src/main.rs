mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowbit::autotune::Metric;
use lowbit::quant::QuantRecipe;
use lowbit::runtime::Sampling;

/// INT4 weight-only quantization and CPU inference for small decoder models.
#[derive(Debug, Parser)]
#[command(name = "lowbit", version)]
struct Cli {
    /// Worker threads for the linear kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize an FP32 model file with one recipe.
    Quantize(QuantizeArgs),
    /// Search the recipe list for one within the target accuracy loss.
    Tune(TuneArgs),
    /// Generate text from a prompt.
    Run(RunArgs),
    /// Next-token accuracy or perplexity over a token file.
    Eval(EvalArgs),
    /// Per-token latency benchmark.
    Bench(BenchArgs),
    /// Print config, tensor table and memory footprint of a model file.
    Inspect(InspectArgs),
    /// Train a small FP32 model on a byte corpus.
    Train(TrainArgs),
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "rtn-asym-g32-int8")]
    recipe: QuantRecipe,
    #[arg(long)]
    out: PathBuf,
    /// Leave the output projection in FP32.
    #[arg(long)]
    keep_lm_head: bool,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw bytes; each byte is one token.
    #[arg(long)]
    eval_tokens: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    target: f64,
    /// Comma-separated recipe list; defaults to the built-in order.
    #[arg(long, value_delimiter = ',')]
    recipes: Vec<QuantRecipe>,
    #[arg(long, default_value = "accuracy")]
    metric: Metric,
    /// Line-delimited JSON, one record per candidate.
    #[arg(long)]
    trail_out: Option<PathBuf>,
    /// Where to write the selected quantized model.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    keep_lm_head: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// greedy, topk:<k> or topp:<p>
    #[arg(long, default_value = "greedy")]
    sampling: Sampling,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw bytes; each byte is one token.
    #[arg(long)]
    tokens: PathBuf,
    #[arg(long, default_value = "accuracy")]
    metric: Metric,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 32)]
    in_tokens: usize,
    #[arg(long, default_value_t = 32)]
    out_tokens: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Columns: iter, token_index, ms, phase.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `key = value` model config; defaults to a 2-layer, 128-wide model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Raw byte corpus; defaults to synthetic text.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Length of the synthetic corpus.
    #[arg(long, default_value_t = 70_000)]
    corpus_len: usize,
    /// Tokens at the end of the corpus kept out of training.
    #[arg(long, default_value_t = 4096)]
    holdout: usize,
    /// Where to write the held-out tokens as raw bytes.
    #[arg(long)]
    holdout_out: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Result of a command that ran to completion.
enum Status {
    Ok,
    NoRecipeMet,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|e| {
        e.downcast_ref::<lowbit::Error>().is_some() || e.downcast_ref::<std::io::Error>().is_some()
    });
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    eprintln!("resolved: threads={} {:?}", cli.threads, cli.command);
    match commands::dispatch(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NoRecipeMet) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
