//! Batch front end: every subcommand reads a JSON config, writes its
//! artifacts and a `report.json` into `--out` (stdout when absent) and exits
//! with 0 on pass, 2 on input errors, 3 on failed preconditions or verdicts
//! and 4 on numeric failures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod inputs;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phaseflow::{Error, Result};

use commands::Ctx;
use report::{exit_code, Report};

#[derive(Debug, Parser)]
#[command(name = "phaseflow", version, about = "Controlled Hamiltonian flows and phase-space density transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for the report and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Overrides the primary tolerance of the subcommand.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Integrates a control schedule and checks the flow invariants.
    Simulate,
    /// Builds a mesh permutation between two densities.
    Rearrange,
    /// Compiles a mesh permutation into exact primitives.
    CompilePerm,
    /// Runs a synthesis construction along its parameter ladder.
    Synth,
    /// Plans exact ensemble steering.
    Steer,
    /// Compares level signatures of two densities.
    VerifyOrbit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Rearrange => "rearrange",
            Command::CompilePerm => "compile-perm",
            Command::Synth => "synth",
            Command::Steer => "steer",
            Command::VerifyOrbit => "verify-orbit",
        }
    }
}

fn run(cli: &Cli) -> Result<Report> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Input("--config is required".into()))?;
    if let Some(t) = cli.tol {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Input("--tol must be positive".into()));
        }
    }
    let text = fs::read_to_string(path)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let ctx = Ctx { base_dir, out: cli.out.as_deref(), seed: cli.seed, tol: cli.tol };
    let rep = match cli.command {
        Command::Simulate => commands::simulate(commands::parse(&text)?, &ctx)?,
        Command::Rearrange => commands::rearrange(commands::parse(&text)?, &ctx)?,
        Command::CompilePerm => commands::compile_perm(commands::parse(&text)?, &ctx)?,
        Command::Synth => commands::synth(commands::parse(&text)?, &ctx)?,
        Command::Steer => commands::steer_cmd(commands::parse(&text)?, &ctx)?,
        Command::VerifyOrbit => commands::verify_orbit(commands::parse(&text)?, &ctx)?,
    };
    Ok(rep.finish())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(dir) = &cli.out {
        if let Err(e) = fs::create_dir_all(dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    let name = cli.command.name();
    let (report, code) = match run(&cli) {
        Ok(r) => {
            let code = if r.passed() { 0 } else { 3 };
            (r, code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            (Report::failed(name, cli.seed, &e), exit_code(&e))
        }
    };
    if let Err(e) = report.write(cli.out.as_deref()) {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(2);
    }
    ExitCode::from(code as u8)
}
