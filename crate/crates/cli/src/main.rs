use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use plwf::config::{parse_config, RunConfig};
use plwf::runner::{audit_cost, run_experiment, RunOptions};

/// Class-incremental training with progressive function matching.
#[derive(Parser)]
#[command(name = "plwf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every arm, seed and class order in a config and write results.
    Run {
        config: PathBuf,
        /// Output directory, overriding `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing result files.
        #[arg(long)]
        force: bool,
        /// Runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the config's seed list, e.g. `--seeds 0,1`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Count function matchings per arm without training.
    AuditCost { config: PathBuf },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn run(config: RunConfig, opts: RunOptions) -> Result<()> {
    println!("# config {}", config.hash());
    print!("{}", config.to_toml());
    println!();
    let summary = run_experiment(&config, &opts)?;
    println!(
        "{:<24} {:>5} {:>17} {:>17} {:>17}",
        "arm", "runs", "avg", "last", "first_task_final"
    );
    for a in &summary.aggregates {
        println!(
            "{:<24} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            a.arm,
            a.runs,
            a.avg.mean,
            a.avg.std,
            a.last.mean,
            a.last.std,
            a.first_task_final.mean,
            a.first_task_final.std
        );
    }
    let dir = opts.out_dir.unwrap_or(config.output_dir);
    println!("wrote {} files to {}", summary.files.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            force,
            jobs,
            seeds,
        } => load(&config).and_then(|mut c| {
            if let Some(seeds) = seeds {
                c.seeds = seeds;
            }
            run(
                c,
                RunOptions {
                    out_dir: out,
                    force,
                    jobs,
                },
            )
        }),
        Command::AuditCost { config } => load(&config).and_then(|c| {
            let lines = audit_cost(&c)?;
            println!(
                "{:<24} {:<20} {:>6} {:>10} {:>10}",
                "arm", "scheme", "tasks", "matchings", "saved"
            );
            for l in lines {
                println!(
                    "{:<24} {:<20} {:>6} {:>10} {:>9.1}%",
                    l.arm, l.scheme, l.tasks, l.matchings, l.reduction_pct
                );
            }
            Ok(())
        }),
        Command::Validate { config } => load(&config).map(|c| {
            println!("# config {}", c.hash());
            print!("{}", c.to_toml());
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
