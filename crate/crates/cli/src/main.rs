//! `bridgelab`: experiment runner producing plot-ready CSVs.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure categories, mapped to exit codes 1, 2 and 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Attaches `path` to an IO error raised without one.
    pub fn at(self, path: &Path) -> Self {
        match self {
            Self::Io { path: p, source } if p.as_os_str().is_empty() => Self::Io { path: path.to_path_buf(), source },
            other => other,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Io { .. } => 2,
            Self::Numerical(_) => 3,
        }
    }
}

impl From<bridgelab::Error> for CliError {
    fn from(e: bridgelab::Error) -> Self {
        use bridgelab::Error as E;
        match e {
            E::Io(source) => Self::Io { path: PathBuf::new(), source },
            E::NumericalFailure { .. }
            | E::Diverged { .. }
            | E::LossDiverged { .. }
            | E::NotPositiveDefinite(_)
            | E::StaleCache(_) => Self::Numerical(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bridgelab", version, about = "Schrödinger bridge experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Validate the config and exit without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form 1D KL trajectories of IDBM and IPF.
    Gauss1d(Common),
    /// Closed-form KL trajectories over random Wishart scenarios.
    Gaussnd(Common),
    /// The 1D mixture experiment: drift fields, terminal densities, couplings.
    Mixture1d(Common),
    /// Neural IDBM on the configured endpoints.
    Idbm(Common),
    /// Neural DIPF on the configured endpoints.
    Dipf(Common),
    /// Score-based generative model on a toy target.
    SgmToy(Common),
    /// Sinkhorn plans against the Gaussian entropic OT correlation.
    SinkhornCompare(Common),
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("BRIDGELAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("BRIDGELAB_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gauss1d(c) => commands::gauss1d(&c),
        Command::Gaussnd(c) => commands::gaussnd(&c),
        Command::Mixture1d(c) => commands::mixture1d(&c),
        Command::Idbm(c) => commands::idbm(&c),
        Command::Dipf(c) => commands::dipf(&c),
        Command::SgmToy(c) => commands::sgm_toy(&c),
        Command::SinkhornCompare(c) => commands::sinkhorn_compare(&c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; help and version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bridgelab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
