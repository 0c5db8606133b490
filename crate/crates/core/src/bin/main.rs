use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use boltzmann_fourier::cli::{run, ExperimentConfig, Scenario};

#[derive(Parser)]
#[command(version, about = "Boltzmann equation for Maxwellian molecules in Fourier variables")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Spectral constants over an α sweep.
    Constants,
    /// Self-similar profile series and its residual.
    Profile,
    /// Evolve a datum; Wild and Runge–Kutta are compared on cutoff kernels.
    Evolve,
    /// Stability bound for pairs of data.
    VerifyStability,
    /// Distance of the rescaled solution to the self-similar profile.
    VerifyAsymptotics,
    /// Positive-definiteness and inequality checks of a datum.
    CheckCf,
}

impl From<Command> for Scenario {
    fn from(c: Command) -> Self {
        match c {
            Command::Constants => Scenario::Constants,
            Command::Profile => Scenario::Profile,
            Command::Evolve => Scenario::Evolve,
            Command::VerifyStability => Scenario::VerifyStability,
            Command::VerifyAsymptotics => Scenario::VerifyAsymptotics,
            Command::CheckCf => Scenario::CheckCf,
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    let args = Args::parse();
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let scenario: Scenario = args.command.into();
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = run(&cfg, scenario, &out)?;
    for check in &report.checks {
        println!(
            "{} {:<48} margin {:.3e}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.margin
        );
    }
    println!(
        "{}: {} ({:.1} s, outputs in {})",
        report.scenario,
        if report.pass { "pass" } else { "fail" },
        report.wall_clock_s,
        out.display()
    );
    Ok(report.pass)
}
