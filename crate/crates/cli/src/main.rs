//! `otdp` — solve, simulate and verify ergodic stochastic control problems.
//!
//! Exit codes are part of the interface: 0 success, 1 configuration error,
//! 2 solver failure, 3 incompatible inputs, 4 failed verification.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "otdp", version, about)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the dynamic-programming recursion and write V, μ and ρ∞.
    Solve(SolveArgs),
    /// Monte-Carlo or noiseless simulation under a feedback table.
    Simulate(SimulateArgs),
    /// Check a certificate or identity and write a report.
    Verify(VerifyArgs),
}

/// Where the problem comes from: a TOML file, a directory holding
/// `config.toml`, a path that gains `.toml`, or `builtin:<name>`.
#[derive(Args)]
pub struct Source {
    pub config: String,
    /// Nodes per axis (default 201 in 1-D, 60 otherwise).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Time step of the semi-implicit scheme.
    #[arg(long, default_value_t = 0.05)]
    pub h: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Ergodic,
    Finite,
}

#[derive(Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub src: Source,
    #[arg(long, value_enum, default_value_t = Mode::Ergodic)]
    pub mode: Mode,
    /// Horizon in steps for `--mode finite`.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Stopping tolerance on the feedback update.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 500_000)]
    pub max_iter: usize,
    /// Steps of the closed-loop density rollout used for the energy trace.
    #[arg(long, default_value_t = 2000)]
    pub energy_steps: usize,
}

#[derive(Args)]
pub struct SimulateArgs {
    pub config: String,
    /// Feedback table written by `solve` (mu_inf.csv).
    #[arg(long)]
    pub feedback: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub traj: usize,
    /// Horizon; defaults to 2000, or 100 with --deterministic.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long, default_value_t = 0.005)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub burn_in: f64,
    /// Keep every n-th state in the path dump.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Noiseless rollouts from eight default starting points.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Hasminskii,
    BakryEmery,
    Duality,
    Conservation,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub src: Source,
    #[arg(long, value_enum)]
    pub check: Check,
    /// Lyapunov constants γ1,γ2,γ3,γ4 (overrides the config).
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Decay parameter λ (overrides the config).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Feedback table for the certificates; zero clamped into U otherwise.
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    /// Accepted relative duality gap.
    #[arg(long, default_value_t = 0.01)]
    pub gap_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

/// Failure classes, each with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Incompatible(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<otdp::Error> for CliError {
    fn from(e: otdp::Error) -> Self {
        use otdp::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::InvalidGrid(_) | E::InvalidParameter(_) | E::Eval(_) => CliError::Config(msg),
            E::Incompatible(_) | E::OutOfDomain(_) => CliError::Incompatible(msg),
            _ => CliError::Solver(msg),
        }
    }
}

fn main() -> ExitCode {
    // Usage errors are configuration errors; clap's own code 2 would read
    // as a solver failure.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
