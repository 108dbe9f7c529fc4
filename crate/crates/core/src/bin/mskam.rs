//! Batch interface: subcommand selects the mode, `--config` supplies the
//! (strict) TOML/JSON configuration, artifacts land under `--out`.
//!
//! Environment overrides use the MSKAM_ prefix: MSKAM_OUT, MSKAM_SEED,
//! MSKAM_WORKERS (flags take precedence over the environment, which takes
//! precedence over the config file).
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 a floor
//! excluded the result set.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mskam::cli::{self, Mode, RunConfig};
use mskam::error::EngineError;

#[derive(Parser)]
#[command(name = "mskam", version, about = "Multi-scale KAM iteration engine")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// High-order preprocessing stage on the configured model.
    Normalize(CommonArgs),
    /// Drive the KAM iteration until the norm target.
    KamRun(CommonArgs),
    /// Excluded-measure estimate over a gamma sweep.
    Measure(CommonArgs),
    /// Resonant-lattice reduction to the lower-dimensional normal form.
    ReduceResonance(CommonArgs),
    /// Nondegeneracy condition checks on a parameter grid.
    CheckConditions(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Configuration file (TOML primary; JSON accepted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed recorded in the manifest and driving all sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-count hint passed to parallel-capable stages.
    #[arg(long)]
    workers: Option<usize>,
    /// Bundled preset (example-6.1 | example-6.2 | example-6.3).
    #[arg(long)]
    preset: Option<String>,
}

fn mode_of(cmd: &Command) -> Mode {
    match cmd {
        Command::Normalize(_) => Mode::Normalize,
        Command::KamRun(_) => Mode::KamRun,
        Command::Measure(_) => Mode::Measure,
        Command::ReduceResonance(_) => Mode::ReduceResonance,
        Command::CheckConditions(_) => Mode::CheckConditions,
    }
}

fn common(cmd: &Command) -> &CommonArgs {
    match cmd {
        Command::Normalize(c)
        | Command::KamRun(c)
        | Command::Measure(c)
        | Command::ReduceResonance(c)
        | Command::CheckConditions(c) => c,
    }
}

fn env_u64(name: &str) -> Option<u64> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn run() -> Result<(), EngineError> {
    let args = Args::parse();
    let mode = mode_of(&args.command);
    let c = common(&args.command);
    let mut cfg: RunConfig = match &c.config {
        Some(path) => cli::load_config(path)?,
        None => RunConfig {
            mode,
            preset: None,
            seed: 0,
            workers: 1,
            out: None,
            schedule: Default::default(),
            grid: None,
            hamiltonian: None,
            resonant: None,
            preprocess: None,
        },
    };
    // the subcommand is authoritative for the mode
    cfg.mode = mode;
    if let Some(p) = &c.preset {
        cfg.preset = Some(p.clone());
    }
    if let Some(seed) = c.seed.or_else(|| env_u64("MSKAM_SEED")) {
        cfg.seed = seed;
    }
    if let Some(w) = c
        .workers
        .or_else(|| env_u64("MSKAM_WORKERS").map(|v| v as usize))
    {
        cfg.workers = w;
    }
    if let Some(p) = &cfg.preset {
        if !matches!(p.as_str(), "example-6.1" | "example-6.2" | "example-6.3") {
            return Err(EngineError::Config(format!("unknown preset '{p}'")));
        }
    }
    let out = cli::resolve_out(c.out.clone(), &cfg);
    let artifacts = cli::execute(&cfg, &out)?;
    if artifacts.excluded_empty {
        return Err(EngineError::FloorViolation {
            which: "run produced an empty surviving set".into(),
            lambda_min: 0.0,
            floor: 0.0,
        });
    }
    for f in &artifacts.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code_for(&e) as u8)
        }
    }
}
