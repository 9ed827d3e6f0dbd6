//! Command-line front end for experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pgk::harness::run::{self, FigureKind, RunOptions};

#[derive(Parser)]
#[command(name = "pgk", version, about = "Fast adversarial training with prior-guided knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on its experiment's evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "pgd10,pgd50")]
        attacks: Vec<String>,
        /// `start:stop:step` in units of 1/255; sweeps the last attack.
        #[arg(long)]
        eps_sweep: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the averaged weights.
        #[arg(long)]
        ema: bool,
    },
    /// Re-render a figure of a finished run.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        figure: String,
    },
    /// Method-by-metric table over run directories.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> pgk::Result<()> {
    match command {
        Command::Train { config, seed, output, resume } => {
            let summary = run::run_config_file(&config, seed, output, RunOptions { resume, stop_after: None })?;
            if let Some(r) = &summary.report {
                println!("{}", serde_json::to_string_pretty(r.reported()).unwrap_or_default());
            }
            println!("run written to {}", summary.dir.display());
        }
        Command::Eval { checkpoint, attacks, eps_sweep, seed, ema } => {
            let sweep = eps_sweep.map(|s| run::parse_eps_sweep(&s)).transpose()?.unwrap_or_default();
            let report = run::evaluate_checkpoint(&checkpoint, &attacks, &sweep, seed, ema)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
        }
        Command::Plot { run: dir, figure } => {
            let png = run::plot_run(&dir, figure.parse::<FigureKind>()?)?;
            println!("{}", png.display());
        }
        Command::Compare { runs } => {
            let (_, table) = run::compare_runs(&runs)?;
            print!("{table}");
        }
    }
    Ok(())
}
