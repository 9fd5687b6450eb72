//! `vine-metic {simulate|fit|replicate|tau}`.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 a fit stage
//! failed (partial results are still written), 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "vine-metic", version, about = "Vine-copula models for event times under informative censoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a dataset and print its censoring rates and Kendall's taus.
    Simulate {
        #[arg(value_enum)]
        scenario: SimScenario,
        /// Number of subjects (required for sim1 and sim2).
        #[arg(long)]
        n: Option<usize>,
        #[arg(short = 'o', long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model to a data CSV.
    Fit {
        /// Data CSV with columns X1,D1,...,XJ,DJ followed by covariates.
        #[arg(long)]
        data: PathBuf,
        /// Model: `sim1`, `sim2` or a JSON file.
        #[arg(long)]
        model: String,
        /// Pool first-tree edges onto one parameter, e.g. "1,3;2,3". Repeat for more groups.
        #[arg(long)]
        pooled: Vec<String>,
        #[arg(long, value_enum)]
        variance: Option<Variance>,
        #[arg(short = 'o', long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat simulate-and-fit and tabulate rBIAS, rESD, rASE, ECP and rRMSE.
    Replicate {
        #[arg(value_enum)]
        scenario: StudyScenario,
        #[arg(long)]
        n: Option<usize>,
        /// Number of replications (at least 10).
        #[arg(long = "reps", short = 'R')]
        reps: Option<usize>,
        #[arg(short = 'o', long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Kendall's tau of every fitted edge, and the unconditional tau of (T1, T2) when J = 3.
    Tau {
        /// FitResult JSON written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Covariate row of the copula design; defaults to the column means.
        #[arg(long, value_delimiter = ',')]
        w: Option<Vec<f64>>,
        /// Monte Carlo draws for the unconditional tau.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// Report only the edge taus (needed for J != 3).
        #[arg(long)]
        edges_only: bool,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SimScenario {
    Sim1,
    Sim2,
    Vine,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum StudyScenario {
    Sim1,
    Sim2,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Variance {
    Sandwich,
    Bootstrap,
    None,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
