//! `dihc`: data generation, training, evaluation, gradient checks and reports.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dihc_core::Error;

/// Process outcome mapped onto the documented exit codes.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and failed (exit 1).
    Check(String),
    /// Bad arguments or unusable input files (exit 2).
    Usage(String),
    /// Training hit a non-finite loss (exit 3).
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(m) => Failure::Numeric(format!("numerical abort: {m}")),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "dihc", version, about = "Semi-supervised 3D segmentation with diversified multi-scale models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic ellipsoid volumes, masks and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Edge length of the cubic volumes (multiple of 8).
        #[arg(long, default_value_t = 32)]
        shape: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the three-model ensemble.
    Train(commands::TrainArgs),
    /// Score model 1 of a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: perturb the conv3d backward pass.
        #[arg(long, hide = true)]
        corrupt_conv3d: bool,
    },
    /// Aggregate finished runs into a comparison table and curve CSV.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { out, n, shape, seed } => commands::gen_data(&out, n, shape, seed),
        Command::Train(args) => commands::train(&args),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, &out),
        Command::Gradcheck { seed, corrupt_conv3d } => commands::gradcheck(seed, corrupt_conv3d),
        Command::Report { runs, out } => report::report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Check(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
