use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use intervene::{BoostConfig, Error, ErrorKind, NormalizationMode, ScaleTag};

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "intervene", version, about = "Transfer-function intervention analysis for count time series")]
struct Cli {
    /// Worker threads; defaults to every available core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from the negative-binomial VAR generator.
    Simulate(SimulateArgs),
    /// Fit a transfer model and save it as JSON.
    Fit(FitArgs),
    /// Forecast every subject with a saved model.
    Predict(PredictArgs),
    /// Select taxa affected by an intervention.
    Select(SelectArgs),
    /// Run the simulation benchmark over a configuration grid.
    Benchmark(BenchmarkArgs),
    /// Rerun the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulator configuration (JSON); omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the dataset CSVs and truth.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleArg {
    Counts,
    Normalized,
    NormalizedAsinh,
}

impl From<ScaleArg> for ScaleTag {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Counts => ScaleTag::Counts,
            ScaleArg::Normalized => ScaleTag::Normalized,
            ScaleArg::NormalizedAsinh => ScaleTag::NormalizedAsinh,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding reads.csv, samples.csv, interventions.csv and subjects.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Scale of the values in reads.csv.
    #[arg(long, value_enum, default_value = "counts")]
    pub scale: ScaleArg,
}

#[derive(Debug, Args)]
pub struct BoostArgs {
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 3)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    #[arg(long, default_value_t = 1.0)]
    pub subsample: f64,
}

impl BoostArgs {
    pub fn config(&self, seed: u64) -> BoostConfig {
        BoostConfig {
            n_rounds: self.rounds,
            learning_rate: self.learning_rate,
            max_depth: self.max_depth,
            min_samples_leaf: self.min_leaf,
            subsample_rows: self.subsample,
            seed,
        }
    }
}

fn parse_normalization(s: &str) -> Result<NormalizationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Abundance lag order.
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    /// Intervention lag order.
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    /// none, sf or sf-asinh.
    #[arg(long, default_value = "none", value_parser = parse_normalization)]
    pub normalize: NormalizationMode,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub boost: BoostArgs,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    /// Where forecasts start: `onset` (first intervention), `end` (after
    /// the last observation) or a column index.
    #[arg(long, default_value = "onset")]
    pub anchor: String,
    /// Intervention value used past the recorded interventions.
    #[arg(long, default_value_t = 0.0)]
    pub pad: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long, default_value = "none", value_parser = parse_normalization)]
    pub normalize: NormalizationMode,
    /// Target false discovery rate.
    #[arg(long, default_value_t = 0.2)]
    pub q_fdr: f64,
    #[arg(long, default_value_t = 25)]
    pub splits: usize,
    /// Comma-separated effect lags (0 is the immediate effect).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub lags: Vec<usize>,
    /// Toggle only this intervention channel; all channels by default.
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub boost: BoostArgs,
    /// Output directory for selection.csv, mirrors.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Grid specification (JSON).
    #[arg(long)]
    pub grid: PathBuf,
    /// Output directory for eval.csv and inference_eval.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    kind: ErrorKind,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Validation => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 4,
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                kind: ErrorKind::Internal,
                message: e.to_string(),
            })?;
    }
    let mut ctx = commands::Context {
        argv,
        start: Instant::now(),
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(&mut ctx, a),
        Command::Fit(a) => commands::fit(&mut ctx, a),
        Command::Predict(a) => commands::predict(&mut ctx, a),
        Command::Select(a) => commands::select(&mut ctx, a),
        Command::Benchmark(a) => commands::benchmark(&mut ctx, a),
        Command::Replay { manifest } => {
            let m = manifest::RunManifest::read(&manifest)?;
            let args = std::iter::once("intervene".to_string()).chain(m.argv.iter().cloned());
            let mut inner = Cli::try_parse_from(args).map_err(|e| Failure::validation(first_line(&e.to_string())))?;
            if matches!(inner.command, Command::Replay { .. }) {
                return Err(Failure::validation("manifest records another replay"));
            }
            if cli.threads.is_some() {
                inner.threads = None;
            }
            run(inner, m.argv)
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("error[validation]: {}", first_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", f.kind.code());
            ExitCode::from(f.exit_code())
        }
    }
}
