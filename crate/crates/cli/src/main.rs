//! `beq`: equilibrium portfolio strategies for betweenness preferences.
//!
//! Subcommands: `solve constrained`, `solve borrowing`, `wellposedness`,
//! `verify hjb`, `verify perturb`. Exit codes: 0 success / verification
//! pass, 2 verification fail, 3 well-posedness not proven, 1 error.

mod commands;
mod config;
mod plots;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Core(beq_core::Error),
    Io(String),
    Syntax(String),
    Semantic { key: String, reason: String },
}

impl CliError {
    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    pub fn syntax(msg: impl Into<String>) -> Self {
        CliError::Syntax(msg.into())
    }

    pub fn semantic(key: &str, reason: &str) -> Self {
        CliError::Semantic {
            key: key.into(),
            reason: reason.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::Syntax(_) => "syntax",
            CliError::Semantic { .. } => "config",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) | CliError::Syntax(m) => write!(f, "{m}"),
            CliError::Semantic { key, reason } => write!(f, "{key}: {reason}"),
        }
    }
}

impl From<beq_core::Error> for CliError {
    fn from(e: beq_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.directory` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `verify.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum SolveCmd {
    /// Convex-constrained problem with zero interest rate.
    Constrained(Common),
    /// Two-rate borrowing-cost problem over unconstrained weights.
    Borrowing(Common),
}

#[derive(Subcommand, Debug)]
enum VerifyCmd {
    /// Generator-residual verification of solver output on a (t, x) grid.
    Hjb {
        #[command(flatten)]
        common: Common,
        /// Scale the stored strategy (a non-equilibrium candidate when != 1).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Monte Carlo perturbation test against constant alternatives.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve for the equilibrium strategy and write solution.csv.
    #[command(subcommand)]
    Solve(SolveCmd),
    /// Evaluate the no-blow-up conditions at the table's y_max.
    Wellposedness(Common),
    /// Verify a candidate independently of the solver.
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Parser, Debug)]
#[command(
    name = "beq",
    version,
    about = "equilibrium portfolio strategies for CRRA betweenness preferences"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let ctx_of = |common: Common| -> Result<commands::Ctx, CliError> {
        let cfg = config::parse_config(&common.config)?;
        commands::Ctx::new(cfg, common.out, common.seed)
    };
    match cli.cmd {
        Cmd::Solve(SolveCmd::Constrained(common)) => {
            commands::solve_constrained_cmd(&ctx_of(common)?)
        }
        Cmd::Solve(SolveCmd::Borrowing(common)) => commands::solve_borrowing_cmd(&ctx_of(common)?),
        Cmd::Wellposedness(common) => commands::wellposedness_cmd(&ctx_of(common)?),
        Cmd::Verify(VerifyCmd::Hjb { common, scale }) => {
            commands::verify_hjb_cmd(&ctx_of(common)?, scale)
        }
        Cmd::Verify(VerifyCmd::Perturb { common, scale }) => {
            commands::verify_perturb_cmd(&ctx_of(common)?, scale)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error kind={} msg=\"{e}\"", e.kind());
            ExitCode::from(1)
        }
    }
}
