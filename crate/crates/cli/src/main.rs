mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Log-polar networks with a learned origin: data generation, training and verification.
#[derive(Debug, Parser)]
#[command(name = "ptn", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config file [default: built-in defaults]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed [default: the config's seed, 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory of run directories
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory, instead of <out>/<timestamp>-<command>-seed<seed>
    /// [default: none]
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Worker threads [default: the config's threads, 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Data directory; MNIST IDX files are read from <data-dir>/mnist
    #[arg(long, global = true, env = "PTN_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a transformed-MNIST dataset as IDX files plus provenance CSV
    GenData(commands::GenData),
    /// Train a network; writes config.toml, metrics.csv and best.ckpt
    Train(commands::Train),
    /// Evaluate a checkpoint on the test split
    Eval(commands::Eval),
    /// Compare every operator's gradient with finite differences
    Gradcheck(commands::Gradcheck),
    /// Run the equivariance checks, optionally on a trained checkpoint
    Equivariance(commands::Equivariance),
    /// Train every ablation for several seeds and report test errors
    Ablate(commands::Ablate),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
