//! `hgave`: build, split, train, evaluate and inspect link-prediction runs.
//!
//! Exit codes: 0 success, 1 bad input, 2 a prior stage is missing, 3 an
//! internal invariant broke.

mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgave_core::synthetic::PlantedConfig;

use config::{Overrides, STORED};
use error::{CliError, CliResult};
use run_dir::{write_json, RunDir};

#[derive(Parser)]
#[command(name = "hgave", version, about = "Zero-shot aspect prediction on product hypergraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the hypergraph and feature table from products and sessions.
    Build(Overrides),
    /// Draw the zero-shot train/validation/test split.
    Split(Overrides),
    /// Train on the split and select fusion weights and threshold.
    Train(Overrides),
    /// Score the test split with the trained checkpoint.
    Eval(Overrides),
    /// Top-k unseen aspects for one product.
    Predict {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        product: String,
        #[arg(long, short, default_value_t = 5)]
        k: usize,
    },
    /// Validation and test scores over the fusion-weight grid.
    Sweep(Overrides),
    /// Build, then split, train and evaluate once per seed.
    Run(Overrides),
    /// Write a planted synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    products: usize,
    #[arg(long, default_value_t = 3)]
    categories: usize,
    #[arg(long, default_value_t = 6)]
    common_aspects: usize,
    #[arg(long, default_value_t = 4)]
    tail_aspects: usize,
    /// Give every category its own pool of common aspects.
    #[arg(long)]
    category_pools: bool,
}

/// Resolves configuration, records it in the run directory and runs `f`.
fn staged(o: &Overrides, f: impl FnOnce(&config::RunConfig, &RunDir) -> CliResult<String>) -> CliResult<String> {
    let (cfg, root) = o.resolve()?;
    let dir = RunDir::new(root);
    write_json(&dir.root().join(STORED), &cfg)?;
    f(&cfg, &dir)
}

fn dispatch(command: Command) -> CliResult<String> {
    match command {
        Command::Build(o) => staged(&o, commands::build),
        Command::Split(o) => staged(&o, commands::split),
        Command::Train(o) => staged(&o, |c, d| commands::train(c, d).map(|r| r.0)),
        Command::Eval(o) => staged(&o, |c, d| commands::eval(c, d).map(|r| r.0)),
        Command::Predict { overrides, product, k } => staged(&overrides, |c, d| commands::predict(c, d, &product, k)),
        Command::Sweep(o) => staged(&o, commands::sweep),
        Command::Run(o) => staged(&o, commands::run),
        Command::Synth(a) => {
            let cfg = PlantedConfig {
                seed: a.seed,
                products: a.products,
                categories: a.categories,
                common_aspects: a.common_aspects,
                tail_aspects: a.tail_aspects,
                category_pools: a.category_pools,
                ..Default::default()
            };
            commands::synth(&cfg, &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::INPUT } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(CliError { code, message }) => {
            eprintln!("hgave: {message}");
            ExitCode::from(code)
        }
    }
}
