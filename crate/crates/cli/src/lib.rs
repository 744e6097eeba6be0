//! `gea`: generate snapshot data, train generator/encoder pairs, evaluate
//! checkpoints and render plots.

mod commands;
mod plot;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "GEA_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "gea",
    version,
    about = "Adversarial generator/encoder training for stochastic processes and stochastic elliptic problems"
)]
struct Cli {
    /// Base directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "gea-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a snapshot dataset and write it as text.
    GenData(GenDataArgs),
    /// Train on a dataset, writing checkpoints, losses and a manifest.
    Train(TrainArgs),
    /// Evaluate selected checkpoints of a run against fresh reference samples.
    Eval(EvalArgs),
    /// Render the CSV outputs of a run as SVG plots.
    Report(ReportArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Args, Debug, Clone)]
struct RunSource {
    /// Built-in preset, see `gea presets`.
    #[arg(long)]
    preset: Option<String>,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    source: RunSource,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of snapshots; defaults to the resampling pool for the configured training set size.
    #[arg(long)]
    count: Option<usize>,
    /// Output file; defaults to `<out-dir>/dataset.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: RunSource,
    /// Dataset from `gen-data`; sampled on the fly (and saved in the run directory) when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for on-the-fly data.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Run directory; defaults to `<out-dir>/<preset or "run">`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Shortcut for `--set epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seeds; several seeds give one sub-directory each.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Independent seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Generated and reference samples for the Wasserstein curve of process runs.
    #[arg(long, default_value_t = 1000)]
    w1_samples: usize,
    /// No progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Output directory; defaults to `<run-dir>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoints averaged.
    #[arg(long, default_value_t = gea_core::trainer::PROTOCOL_CHECKPOINTS)]
    checkpoints: usize,
    /// Epoch window they are spread over; defaults to the last 30 % of training.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 101)]
    test_points: usize,
    #[arg(long, default_value_t = 1000)]
    test_samples: usize,
    #[arg(long, default_value_t = 1000)]
    reference_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Evaluation directory; defaults to `<run-dir>/eval`.
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    /// Plot directory; defaults to `<run-dir>/plots`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.out_dir, a),
        Command::Train(a) => commands::train(&cli.out_dir, a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => report::report(a),
        Command::Presets => {
            print!("{}", commands::preset_table());
            Ok(())
        }
    }
}
