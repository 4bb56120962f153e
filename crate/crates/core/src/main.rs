use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use shadowsync::experiment::{compare, run_experiment_observed, write_artifacts};
use shadowsync::{ExecMode, ExperimentConfig};

#[derive(Parser)]
#[command(name = "shadowsync", version, about = "Simulated data-parallel training with BMUF and MA/EMA shadow models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write curves.csv, final.csv and manifest.toml.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run all workers on the main thread.
        #[arg(long)]
        single_thread: bool,
    },
    /// Print final test FER and relative reduction against bmuf.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            single_thread,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let mode = if single_thread {
                ExecMode::SingleThread
            } else {
                ExecMode::Threaded
            };
            let started = Instant::now();
            let mut loss_sum = 0.0;
            let mut blocks = 0u64;
            let outcome = run_experiment_observed(&cfg, mode, |_, report| {
                loss_sum += report.train_loss;
                blocks += 1;
            })?;
            write_artifacts(&outcome, &out).with_context(|| format!("writing artifacts to {}", out.display()))?;
            eprintln!(
                "{} blocks in {:.1}s, mean train loss {:.4}",
                blocks,
                started.elapsed().as_secs_f64(),
                loss_sum / blocks.max(1) as f64
            );
            for (strategy, fer) in &outcome.final_fer {
                eprintln!("final {strategy:<4} test FER {fer:.4}");
            }
        }
        Command::Compare { run_dirs } => {
            let dirs: Vec<&std::path::Path> = run_dirs.iter().map(PathBuf::as_path).collect();
            print!("{}", compare(&dirs)?);
        }
    }
    Ok(())
}
