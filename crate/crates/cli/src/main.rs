//! `cessl`: synthetic data, pretraining, adaptation, evaluation, gradient
//! checks and benchmarks from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cessl::trainer::UnlabeledSource;
use cessl::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cessl", version, about = "Semi-supervised low-rank adaptation of a signal classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic multi-label dataset (manifest plus signal files).
    Synth(SynthArgs),
    /// Supervised training of every weight of a backbone.
    Pretrain(RunArgs),
    /// One-shot rank allocation followed by semi-supervised adapter training.
    Adapt(RunArgs),
    /// Metrics of a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Analytic gradients of every layer against finite differences.
    Gradcheck(GradcheckArgs),
    /// Median time per iteration and trainable parameters across variants.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Samples per record.
    #[arg(long, default_value_t = 512)]
    pub len: usize,
    #[arg(long, default_value_t = cessl::signal::TARGET_RATE)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated class priors.
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2.0)]
    pub burst_amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Init {
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Pool,
    Mirror,
}

impl From<Source> for UnlabeledSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Pool => UnlabeledSource::Pool,
            Source::Mirror => UnlabeledSource::Mirror,
        }
    }
}

/// Overrides for the trainer section of the run configuration.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainerFlags {
    #[arg(long)]
    pub labeled_batch: Option<usize>,
    #[arg(long)]
    pub unlabeled_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gate deactivation probability.
    #[arg(long)]
    pub p: Option<f64>,
    /// Initial (even) adapter rank.
    #[arg(long)]
    pub r: Option<usize>,
    /// Fraction of weights keeping the full rank.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, visible_alias = "freeze-conv")]
    pub freeze_first_k_conv: Option<usize>,
    #[arg(long)]
    pub semi_bn: Option<bool>,
    #[arg(long, value_enum)]
    pub unlabeled_source: Option<Source>,
    #[arg(long)]
    pub cutmix: Option<bool>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Overrides for the split section.
#[derive(Args, Debug, Default, Clone)]
pub struct SplitFlags {
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long, visible_alias = "labeled-frac")]
    pub labeled_frac_of_train: Option<f64>,
    #[arg(long)]
    pub val_frac_of_labeled: Option<f64>,
    /// Split seed; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub group_by_patient: Option<bool>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest file, or a directory holding `manifest.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from freshly initialized weights instead of a checkpoint.
    #[arg(long, value_enum)]
    pub init: Option<Init>,
    /// Backbone preset used with `--init random`.
    #[arg(long, value_enum)]
    pub backbone: Option<Preset>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Seeds training and, unless --split-seed is given, the split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub trainer: TrainerFlags,
    #[command(flatten)]
    pub split: SplitFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Test,
    Val,
    Labeled,
    Unlabeled,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, default_value_t = cessl::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub split_flags: SplitFlags,
    /// Directory for `metrics.json`; the report always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Perturb one layer's analytic gradients (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Manifest or dataset directory; a synthetic set is generated in memory
    /// when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.5])]
    pub p_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 16])]
    pub r_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 2])]
    pub freeze_values: Vec<usize>,
    /// Timed iterations per variant; the first five are discarded.
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub trainer: TrainerFlags,
    /// Directory for `bench.csv`; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Numerical(_) | Error::Oracle { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
