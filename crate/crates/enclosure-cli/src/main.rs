//! `enclosure`: batch driver for the enclosure laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use enclosure::experiment::{self, Check, Experiment, IndicatorStage};

#[derive(Parser)]
#[command(name = "enclosure", version, about = "Time-domain enclosure method in a two-layer medium")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Exit with status 1 when any check fails.
    #[arg(long, global = true)]
    check: bool,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Refraction-point oracle scans, l(D,B) rows and modified-path scans.
    Optics,
    /// Kernel asymptotic ratio table, supercritical rates and kernel export.
    Green,
    /// Wave synthesis: trace files and run summaries.
    Simulate,
    /// Synthesis plus indicator curves, bound checks and energy rates.
    Indicator,
    /// Decay-rate fit, contrast classification and region estimate.
    Reconstruct,
}

fn report(checks: &[Check]) {
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let note = if c.required { "" } else { " (informational)" };
        println!("{status} {}: {}{note}", c.name, c.detail);
    }
}

fn indicator_stage(e: &Experiment, out: &Path) -> Result<(IndicatorStage, Vec<Check>)> {
    let sim = e.simulate()?;
    sim.write(out)?;
    let stage = e.indicator(&sim)?;
    stage.write(out)?;
    let mut checks = stage.checks.clone();
    if let Some(energy) = e.energy()? {
        energy.write(out)?;
        checks.extend(energy.checks);
    }
    Ok((stage, checks))
}

fn execute(cli: &Cli) -> Result<Vec<Check>> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let path = c.config.as_ref().context("--config PATH is required")?;
    let mut e = Experiment::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = c.seed {
        e = e.with_seed(seed)?;
    }
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let out = c.out.as_path();
    let checks = match cli.command {
        Command::Optics => {
            let r = e.optics()?;
            r.write(out)?;
            r.checks
        }
        Command::Green => {
            let r = e.green()?;
            r.write(out)?;
            r.checks
        }
        Command::Simulate => {
            e.simulate()?.write(out)?;
            Vec::new()
        }
        Command::Indicator => indicator_stage(&e, out)?.1,
        Command::Reconstruct => {
            let count = e.config.inclusions.len();
            let (stage, mut checks) = match IndicatorStage::read_fit_curves(out, count, &e.hash) {
                Ok(curves) => (experiment::stage_from_curves(&e.hash, curves), Vec::new()),
                Err(_) => indicator_stage(&e, out)?,
            };
            let r = e.reconstruct(&stage)?;
            r.write(out)?;
            checks.extend(r.checks);
            checks
        }
    };
    println!("config_hash {}", e.hash);
    Ok(checks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(checks) => {
            report(&checks);
            if cli.common.check && !experiment::all_passed(&checks) {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
