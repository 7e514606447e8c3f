//! Command-line front end: dataset generation, training under a strategy,
//! auxiliary-structure search and strategy comparison tables.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "auxmtl",
    version,
    about = "Auxiliary modules for multi-task dense prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1536)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
    },
    /// Train one model and write run.csv, eval.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// single-tK, joint, prior-tK, ds-tK, kendall, auxi-tK, auxi-both or
        /// auxi-nas; defaults to the one implied by `aux.mode`.
        #[arg(long)]
        strategy: Option<String>,
        /// Checkpoint of the single-task model that initializes the shared layers.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search auxiliary structures; writes search.log, opstats.csv and best.genotype.json.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (strategy, seed) pair and write table.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            seed,
            n,
            out,
            height,
            width,
            classes,
        } => commands::gen_data(seed, n, &out, height, width, classes),
        Command::Train {
            config,
            strategy,
            init_ckpt,
            out,
        } => commands::train(
            &config,
            strategy.as_deref(),
            init_ckpt.as_deref(),
            out.as_deref(),
        ),
        Command::Search { config, out } => commands::search(&config, out.as_deref()),
        Command::Compare {
            config,
            strategies,
            seeds,
            out,
        } => commands::compare(&config, &strategies, &seeds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
