//! `chdg converge|run|verify --config <file> [--set key=value ...]`

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "chdg", version, about = "Degenerate-mobility Cahn-Hilliard DG experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy)]
enum Kind {
    Converge,
    Run,
    Verify,
}

#[derive(clap::Args)]
struct Args {
    /// JSON configuration; keys missing from it come from the experiment preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set mesh.n=[8,16]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Manufactured-solution error sweep, writes eoc.csv and summary.json.
    Converge(Args),
    /// Droplet run, writes series.csv, summary.json and VTK snapshots.
    Run(Args),
    /// Inequality, limiter and conservation checks, writes verify.json.
    Verify(Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Converge(a) => (Kind::Converge, a),
        Command::Run(a) => (Kind::Run, a),
        Command::Verify(a) => (Kind::Verify, a),
    };
    let outcome = RunConfig::load(args.config.as_deref(), &args.set).and_then(|cfg| match kind {
        Kind::Converge => commands::converge(&cfg),
        Kind::Run => commands::run_experiment(&cfg),
        Kind::Verify => commands::verify(&cfg),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("chdg: checks failed, see the report");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("chdg: {e:#}");
            ExitCode::from(2)
        }
    }
}
