use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xconst::experiment::{self, ExperimentConfig};
use xconst::Error;

const EXIT_PARTIAL_SWEEP: u8 = 5;

#[derive(Parser)]
#[command(name = "xconst", version, about = "Cross-lingual consistency training on synthetic cipher languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, test and multi-way splits.
    GenData(Common),
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Translate the test split and score it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Project multi-way representations and score their alignment.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every (strategy, alpha, lora, seed) cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of cells run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Tabulate evaluated run directories.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> xconst::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config)?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write_report(out: &Path, runs: &[PathBuf]) -> xconst::Result<bool> {
    let (table, skipped) = experiment::cmd_report(runs);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.md"), &table)?;
    print!("{table}");
    Ok(skipped.is_empty())
}

fn run(cli: Cli) -> xconst::Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => {
            experiment::cmd_gen_data(&load(&c)?, &c.out)?;
        }
        Command::Train(c) => {
            experiment::cmd_train(&load(&c)?, &c.out)?;
        }
        Command::Evaluate { common, checkpoint } => {
            let report = experiment::cmd_evaluate(&load(&common)?, &checkpoint, &common.out)?;
            print!("{}", report.to_markdown());
        }
        Command::Analyze { common, checkpoint } => {
            let res = experiment::cmd_analyze(&load(&common)?, &checkpoint, &common.out)?;
            println!("alignment_score {:.6}", res.alignment.score);
        }
        Command::Sweep { common, parallel } => {
            let outcome = experiment::cmd_sweep(&load(&common)?, &common.out, parallel)?;
            for (cell, err) in &outcome.failures {
                log::error!("cell {cell} failed: {err}");
            }
            if !outcome.failures.is_empty() {
                return Ok(ExitCode::from(EXIT_PARTIAL_SWEEP));
            }
        }
        Command::Report { out, runs } => {
            if !write_report(&out, &runs)? {
                return Err(Error::Data("some run directories were skipped".into()));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("XCONST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
