//! `fastgate`: design and analyse fast entangling gates in ion chains.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error, including disagreement between the two error routes |
//! | 2 | configuration error |
//! | 3 | chain solver failure |
//! | 4 | no feasible gate |
//! | 5 | malformed pulse sequence |

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastgate_core::Error;

#[derive(Debug, Parser)]
#[command(name = "fastgate", version, about = "Fast trapped-ion entangling gate design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Equilibrium positions, modes, Lamb-Dicke parameters and occupations.
    Chain(Common),
    /// Optimise a gate.
    Design(Common),
    /// Recompute every metric of an existing sequence.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Sequence, or a document embedding one.
        #[arg(long)]
        sequence: PathBuf,
        /// Reinterpret the sequence with this kick scheme.
        #[arg(long, value_parser = ["unpaired", "paired"])]
        scheme: Option<String>,
    },
    /// Phase-space trajectories of every mode and spin branch.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Repetition-rate, jitter, mode-frequency and temperature scans.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Existing solution; designed from the configuration if absent.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Pulse-error Monte Carlo.
    Mc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Config(String),
    Solver(String),
    Infeasible(String),
    Sequence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Sequence(_) => 5,
        }
    }

    /// Solver and feasibility failures keep their own codes; anything else
    /// is attributed by `other`.
    pub fn from_core(e: Error, other: fn(String) -> CliError) -> CliError {
        match e {
            Error::SolverDivergence { .. } | Error::CalibrationFailed { .. } | Error::NonPositiveMode { .. } => {
                CliError::Solver(e.to_string())
            }
            Error::Infeasible(_) => CliError::Infeasible(e.to_string()),
            _ => other(e.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Internal(m) => ("internal error", m),
            CliError::Config(m) => ("configuration error", m),
            CliError::Solver(m) => ("solver failure", m),
            CliError::Infeasible(m) => ("infeasible", m),
            CliError::Sequence(m) => ("malformed sequence", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Chain(c) | Command::Design(c) => c,
        Command::Evaluate { common, .. }
        | Command::Simulate { common, .. }
        | Command::Sweep { common, .. }
        | Command::Mc { common, .. } => common,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut cfg = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| CliError::Internal(format!("{}: {e}", common.out.display())))?;
    let out = common.out.clone();
    match cli.command {
        Command::Chain(_) => commands::chain(&cfg, &out),
        Command::Design(_) => commands::design(&cfg, &out),
        Command::Evaluate { sequence, scheme, .. } => commands::evaluate(&cfg, &out, &sequence, scheme.as_deref()),
        Command::Simulate { solution, .. } => commands::simulate(&cfg, &out, &solution),
        Command::Sweep { solution, .. } => commands::sweep(&cfg, &out, solution.as_deref()),
        Command::Mc { solution, .. } => commands::mc(&cfg, &out, solution.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fastgate: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
