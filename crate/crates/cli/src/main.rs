//! `vpfp`: equilibria, certificates, evolutions and decay probes from one config file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible certificate,
//! 4 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vpfp", version, about = "Vlasov-Poisson-Fokker-Planck equilibria, decay certificates and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON, or TOML by extension). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of the probe randomisation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Switch the self-consistent field off.
    #[arg(long, global = true)]
    coupling_off: bool,
    /// Inflate the certified rate tenfold in the decay probe; its verdict must fail.
    #[arg(long, global = true)]
    negative_control: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Solve for the equilibrium.
    Steady,
    /// Estimate constants and certify a decay rate.
    Certify,
    /// Evolve a perturbation and record functionals.
    Evolve,
    /// Run the decay and hypoelliptic probes.
    Probe,
    /// Everything above.
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Steady => "steady",
            Command::Certify => "certify",
            Command::Evolve => "evolve",
            Command::Probe => "probe",
            Command::All => "all",
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn infeasible(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl From<vpfp::Error> for Failure {
    fn from(e: vpfp::Error) -> Self {
        let code = match &e {
            e if e.is_input_error() => 2,
            vpfp::Error::Infeasible(_) => 3,
            _ => 4,
        };
        Self { code, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 4, error: e.into() }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self { code: 4, error: e.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<(), Failure> {
        let (bytes, mut cfg) = match &cli.config {
            Some(p) => config::load(p).map_err(Failure::config)?,
            None => (Vec::new(), config::RunConfig::default()),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if cli.coupling_off {
            cfg.pbe.coupling = 0.0;
        }
        if cli.negative_control {
            cfg.probes.decay_config.lambda_multiplier = 10.0;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        let ctx = commands::Context::new(cli.command, cfg, &bytes, out);
        commands::run(&ctx)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
