//! Command-line driver: data generation, training in both regimes,
//! distributed serve/join, evaluation grids and reports.

mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use fedroam::eval::Regime;
use fedroam::fl::Weighting;
use fedroam::netproto::DEFAULT_PORT;

pub use error::{Failure, EXIT_BAD_INPUT, EXIT_INTERNAL, EXIT_PROTOCOL};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "fedroam",
    version,
    about = "Federated vs. centralized training of a blocked/free classifier"
)]
pub struct Cli {
    /// Worker threads for grid columns and federated clients. Results do
    /// not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Re-run the invocation recorded in a run manifest.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate environment datasets with train/validation splits.
    GenData(GenDataArgs),
    /// Train one model, centralized or federated.
    Train(TrainArgs),
    /// Aggregation server of a distributed federated run.
    Serve(ServeArgs),
    /// Join a distributed run as a client.
    Join(JoinArgs),
    /// Accuracy and AUC grids over all environment combinations.
    Grid(GridArgs),
    /// Accuracy of every combination on the real-domain hold-out.
    Sim2real(Sim2RealArgs),
    /// Evaluate a model file on datasets.
    Eval(EvalArgs),
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    s.parse().map_err(|e: fedroam::fl::FlError| e.to_string())
}

/// Training settings shared by every subcommand that trains.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainingArgs {
    /// key = value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// samples or uniform
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    /// Falls back to the config file, then FEDROAM_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture descriptor, e.g. `input=64x64x3;conv=8,5,2,2;relu;...`.
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// sim or real
    #[arg(long, default_value = "sim")]
    pub table: String,
    #[arg(long, default_value_t = 3000)]
    pub total: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of each class held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Also write the real-domain hold-out R* with this many images.
    #[arg(long, num_args = 0..=1, default_missing_value = "400")]
    pub holdout: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// centralized or federated
    #[arg(long)]
    pub regime: Regime,
    /// Training dataset manifests (or their stems).
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// 0 picks a free port; the bound address is printed first.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long)]
    pub clients: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct JoinArgs {
    /// host:port of the server.
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the dataset name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also score every column on this hold-out set.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct Sim2RealArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<data>/Rstar-val.manifest`.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Write a CSV report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let command = match (cli.command, cli.replay) {
        (Some(c), None) => c,
        (None, Some(path)) => {
            let m = RunManifest::read(&path)?;
            let argv = std::iter::once("fedroam".to_string()).chain(m.args);
            let replayed = Cli::try_parse_from(argv)
                .map_err(|e| Failure::bad_input(format!("replaying {}: {e}", path.display())))?;
            replayed
                .command
                .ok_or_else(|| Failure::bad_input("manifest args name no subcommand"))?
        }
        _ => {
            return Err(Failure::bad_input(
                "give a subcommand or --replay <manifest>",
            ))
        }
    };
    match command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Join(a) => commands::join(&a),
        Command::Grid(a) => commands::grid(&a),
        Command::Sim2real(a) => commands::sim2real(&a),
        Command::Eval(a) => commands::eval(&a),
    }
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let jobs = cli.jobs;
    let result = match jobs {
        Some(0) => Err(Failure::bad_input("--jobs must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(Failure::Internal(e.into())),
        },
        None => dispatch(cli),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
