//! The `mtc` command line: training, evaluation protocols, the Gaussian
//! total-correlation oracle and report generation.

mod commands;
mod output;
pub mod reference;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use mtc_core::config::Algo;
use mtc_core::envs::ENV_IDS;
use mtc_core::eval::PerturbKind;
use mtc_core::MtcError;

pub use output::{Manifest, OutputLock};

/// Manifest value of `code_version`.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "mtc", version, about = "Total-correlation regularized soft actor-critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an agent and write checkpoints, metrics and a manifest under --out
    Train(TrainArgs),
    /// Sweep one perturbation kind over levels and seeds
    EvalRobustness(RobustnessArgs),
    /// Compressed size of rounded evaluation trajectories
    EvalCompress(CompressArgs),
    /// Held-out t-step action prediction NLL of evaluation trajectories
    EvalPredict(PredictArgs),
    /// Analytic total correlation of an AR(1) chain against the Monte-Carlo bound
    TcOracle(OracleArgs),
    /// Merge report CSVs and optionally renormalize scores
    Report(ReportArgs),
    /// Print the flag and config key reference as Markdown
    Reference,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Environment id
    #[arg(long, value_parser = PossibleValuesParser::new(ENV_IDS))]
    pub env: String,
    /// Training algorithm [default: mtc]
    #[arg(long, value_parser = PossibleValuesParser::new(Algo::NAMES))]
    pub algo: Option<String>,
    /// Environment steps (config key total_steps)
    #[arg(long)]
    pub steps: Option<u64>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Constraint level of the dual update
    #[arg(long, allow_negative_numbers = true)]
    pub ip: Option<f64>,
    /// Bound mixing coefficient
    #[arg(long)]
    pub m: Option<f64>,
    /// Transitions per replay window
    #[arg(long)]
    pub history: Option<usize>,
    /// Config file of `key = value` lines, applied before the flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Set any config key; repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from state.ckpt under --out when it exists
    #[arg(long)]
    pub resume: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Checkpoint selection shared by the evaluation commands. Environment,
/// method and horizon default to the training manifest beside the checkpoint.
#[derive(Args, Debug)]
pub struct CkptArgs {
    /// Model checkpoint written by train
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Environment id
    #[arg(long, value_parser = PossibleValuesParser::new(ENV_IDS))]
    pub env: Option<String>,
    /// Method label written to the output rows
    #[arg(long)]
    pub method: Option<String>,
    /// Episode length in steps
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub ckpt: CkptArgs,
    /// Perturbation to sweep
    #[arg(long, value_parser = PossibleValuesParser::new(PerturbKind::NAMES))]
    pub noise_kind: String,
    /// Comma-separated levels [default: the unperturbed level followed by the kind's grid]
    #[arg(long, value_parser = list::<f64>)]
    pub levels: Option<List<f64>>,
    /// Comma-separated evaluation seeds
    #[arg(long, value_parser = list::<u64>, default_value = "0,1,2,3,4")]
    pub seeds: List<u64>,
    /// Episodes per (level, seed) cell
    #[arg(long, default_value_t = 30)]
    pub episodes: usize,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[command(flatten)]
    pub ckpt: CkptArgs,
    /// Evaluation episodes
    #[arg(long, default_value_t = 30)]
    pub episodes: usize,
    /// Evaluation seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lossless compressor
    #[arg(long, value_parser = PossibleValuesParser::new(["bzip2"]), default_value = "bzip2")]
    pub compressor: String,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub ckpt: CkptArgs,
    /// Comma-separated prediction offsets
    #[arg(long, value_parser = list::<usize>, default_value = "3,5,8,10")]
    pub t: List<usize>,
    /// Evaluation episodes
    #[arg(long, default_value_t = 30)]
    pub episodes: usize,
    /// Evaluation and predictor seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adam steps of each predictor fit
    #[arg(long, default_value_t = 2000)]
    pub predictor_steps: usize,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Lag-one autocorrelation
    #[arg(long, allow_negative_numbers = true)]
    pub rho: f64,
    /// Chain length
    #[arg(long)]
    pub n: usize,
    /// Monte-Carlo chains
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write tc_oracle.csv and its manifest here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report CSVs to merge, in order
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Recompute normalized scores across all merged rows
    #[arg(long)]
    pub normalize: bool,
    /// Episode length used for the return floor
    #[arg(long, default_value_t = mtc_core::envs::DEFAULT_HORIZON)]
    pub horizon: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Non-empty comma-separated list flag.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn list<T: FromStr>(s: &str) -> Result<List<T>, String> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
    if items.is_empty() {
        return Err("expected a non-empty comma-separated list".into());
    }
    items
        .iter()
        .map(|x| x.parse().map_err(|_| format!("cannot parse {x:?}")))
        .collect::<Result<Vec<T>, String>>()
        .map(List)
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(MtcError),
}

impl CliError {
    /// 2 for usage and configuration problems, 4 for numerical faults, 3 for
    /// every other data or contract failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(MtcError::Config(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MtcError> for CliError {
    fn from(e: MtcError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::EvalRobustness(a) => commands::eval_robustness(a),
        Command::EvalCompress(a) => commands::eval_compress(a),
        Command::EvalPredict(a) => commands::eval_predict(a),
        Command::TcOracle(a) => commands::tc_oracle(a),
        Command::Report(a) => commands::report(a),
        Command::Reference => {
            print!("{}", reference::markdown());
            Ok(())
        }
    }
}
