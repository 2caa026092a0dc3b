//! Benchmark front end for the interacting-particle estimation toolkit.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 every attempted
//! replicate failed numerically.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ips_bench::config::load_config;
use ips_bench::run::{cmd_asymptotics, cmd_estimate, cmd_experiment, cmd_simulate, exit_code_for, out_dir};

#[derive(Parser)]
#[command(name = "ips-bench", about = "Simulation and estimation benchmarks for weakly interacting SDE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replicate-level parallelism.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate replicate datasets (rep{k}.csv + metadata).
    Simulate(CommonArgs),
    /// Run one estimation per configured (method, mode) on replicate 0.
    Estimate(CommonArgs),
    /// Replicate experiment: estimates.csv, summary.json, boxplot.csv.
    Experiment(CommonArgs),
    /// Precision-matrix plug-in report and optional CLT diagnostic.
    Asymptotics(CommonArgs),
}

fn run(args: &CommonArgs, f: impl FnOnce(&ips_bench::config::ExperimentConfig, &std::path::Path) -> ips_core::Result<i32>) -> i32 {
    let cfg = match load_config(&args.config, args.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let out = match out_dir(args.out.clone()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match f(&cfg, &out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Simulate(a) => run(a, |cfg, out| cmd_simulate(cfg, out)),
        Command::Estimate(a) => run(a, |cfg, out| cmd_estimate(cfg, out)),
        Command::Experiment(a) => {
            let workers = a.workers.max(1);
            run(a, move |cfg, out| cmd_experiment(cfg, out, workers))
        }
        Command::Asymptotics(a) => run(a, |cfg, out| cmd_asymptotics(cfg, out)),
    };
    ExitCode::from(code as u8)
}
