//! Command line for clustering with per-cluster variational
//! autoencoders: generate datasets, train, evaluate, sample, and
//! compare against a GMM baseline.

mod checkpoint;
mod commands;
mod config;
mod dataio;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mixvae", version, about = "EM clustering with one variational autoencoder per cluster")]
struct Cli {
    /// Seed for the command; `train` uses it to override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration file (`train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output: `gen-data`/`generate` a file, `train` a directory,
    /// `eval`/`baseline-gmm` an optional report file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset as CSV.
    GenData(commands::GenDataArgs),
    /// Fit the clustering on a dataset and write run artifacts.
    Train(commands::TrainArgs),
    /// Score a checkpoint's cluster assignments against labels.
    Eval(commands::EvalArgs),
    /// Draw samples from a checkpoint's per-cluster models.
    Generate(commands::GenerateArgs),
    /// Fit a diagonal Gaussian mixture on the raw features and score it.
    BaselineGmm(commands::BaselineGmmArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenData(args) => {
            let out = cli.out.context("gen-data writes a CSV file; pass --out <file>")?;
            commands::gen_data(args, seed, &out)
        }
        Command::Train(args) => {
            let config = cli
                .config
                .context("train needs a run configuration; pass --config <file>")?;
            let out = cli
                .out
                .context("train writes run artifacts; pass --out <directory>")?;
            commands::train(&config, args, cli.seed, &out)
        }
        Command::Eval(args) => commands::eval(args, seed, cli.out.as_deref()),
        Command::Generate(args) => {
            let out = cli.out.context("generate writes samples; pass --out <file>")?;
            commands::generate(args, seed, &out)
        }
        Command::BaselineGmm(args) => commands::baseline_gmm(args, seed, cli.out.as_deref()),
    }
}
