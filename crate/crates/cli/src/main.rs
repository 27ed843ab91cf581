//! `tagmt` command-line entry point.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tagmt",
    version,
    about = "Tag-prefixed many-to-many translation lab"
)]
struct Cli {
    /// Seed for every random choice [default: 13].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value config file (TOML); flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, clean, split and count parallel data.
    #[command(subcommand)]
    Data(DataCmd),
    /// Subword vocabulary.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Train one setting.
    Train(TrainArgs),
    /// Translate lines of text.
    Translate(TranslateArgs),
    /// Score a model on one direction.
    Evaluate(EvaluateArgs),
    /// Synthetic languages.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Train and evaluate BASE, BT and BT&REC.
    Compare(CompareArgs),
    /// Render saved comparison or evaluation artifacts.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    Prepare(PrepareArgs),
    Stats(StatsArgs),
    Split(SplitArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// `src-tgt=path`, repeatable. `.jsonl` files are read as JSON lines,
    /// anything else as two tab-separated columns.
    #[arg(long = "parallel", required = true)]
    parallel: Vec<String>,
    /// `lang=path`, repeatable.
    #[arg(long = "mono")]
    mono: Vec<String>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Data directory with `parallel.jsonl`.
    #[arg(long)]
    data: PathBuf,
    /// Count one split only.
    #[arg(long)]
    split: Option<String>,
    /// Also write CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    no_stratify: bool,
    /// Output directory (defaults to rewriting `--data`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TokenizerCmd {
    Train(TokTrainArgs),
}

#[derive(Args)]
struct TokTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Language tags in id order (default: languages of the data).
    #[arg(long)]
    langs: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct ExperimentFlags {
    /// desk, paper-baseline or paper-final.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    langs: Option<String>,
    /// Unordered pair `a-b` left out in both directions; repeatable.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Comma-separated per-round list, e.g. `100,50,10`.
    #[arg(long)]
    num_bt: Option<String>,
    #[arg(long)]
    num_sample: Option<usize>,
    #[arg(long)]
    num_rec: Option<usize>,
    #[arg(long)]
    start_epoch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// base, bt or btrec.
    #[arg(long)]
    setting: Option<String>,
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Synthetic ground truth, enabling off-target rates.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    resume: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeFlags {
    /// greedy, sample or beam.
    #[arg(long, default_value = "greedy")]
    mode: String,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Run directory or checkpoint file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// One sentence per line; `-` for stdin.
    #[arg(long, default_value = "-")]
    input: PathBuf,
    /// Target language tag prepended to untagged lines.
    #[arg(long)]
    to: Option<String>,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Two-column TSV, JSON lines, or a data directory (test split).
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    direction: String,
    #[command(flatten)]
    decode: DecodeFlags,
    /// Ground truth for off-target rates (default: `truth.json` in a
    /// `--test` data directory).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report directory (defaults to `eval-<direction>` next to the model).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCmd {
    Generate(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    langs: String,
    #[arg(long)]
    low_resource: Option<String>,
    #[arg(long)]
    n_parallel: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    n_mono: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Comma-separated seeds; the table reports the cellwise median.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// `comparison.json` written by `compare`.
    #[arg(long)]
    comparison: Option<PathBuf>,
    /// `report.json` files written by `evaluate`; repeatable.
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    /// Output directory for the chart and tables.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!(
                "error[usage]: {}",
                first.strip_prefix("error: ").unwrap_or(first)
            );
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
