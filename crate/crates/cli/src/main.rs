mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::{Ctx, FitEcnArgs, Method};
use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("invariant breach in {module}: {id}: {detail}")]
    Invariant { module: &'static str, id: &'static str, detail: String },
    #[error("criteria failed: {0:?}")]
    CriteriaFailed(Vec<u32>),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] dealersim::sim::SimError),
    #[error(transparent)]
    Calibration(#[from] dealersim::calibration::CalibrationError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use dealersim::calibration::CalibrationError as C;
        use dealersim::sim::SimError as S;
        match self {
            CliError::MissingFile(_) | CliError::Config(_) | CliError::Sim(S::Config(_)) | CliError::Calibration(C::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dealersim", version, about = "Dealer-market simulation lab")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, env = "DEALERSIM_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, env = "DEALERSIM_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "DEALERSIM_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "DEALERSIM_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the ECN generative model to an L2 snapshot CSV.
    FitEcn {
        #[arg(long)]
        input: PathBuf,
        /// Levels per side.
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// Components of the variation mixture.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Components of the initial-state mixture; defaults to `k`.
        #[arg(long)]
        init_k: Option<usize>,
        /// Sampling interval in seconds.
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        #[arg(long, default_value_t = 1e-5)]
        tick: f64,
        #[arg(long, default_value_t = 1.0)]
        lot: f64,
    },
    /// Roll out episodes and check cross-agent invariants.
    Simulate {
        #[arg(long)]
        episodes: Option<usize>,
        /// LP policy document written by `train`.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Train the shared LP policy.
    Train {
        /// Total episodes; rounded up to whole batches.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Calibrate agent supertypes to market targets.
    Calibrate {
        #[arg(long, value_enum, default_value = "calsheq")]
        method: Method,
        /// Calibration targets document.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Trace the potential and Hamiltonian weights along gradient play.
    Decompose {
        #[arg(long)]
        game: String,
    },
    /// Run the acceptance checks and write a report.
    Verify {
        /// Comma-separated criterion ids.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u32>>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let config = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    let ctx = Ctx { config, out: cli.out };
    match cli.command {
        Command::FitEcn {
            input,
            m,
            k,
            init_k,
            dt,
            tick,
            lot,
        } => commands::fit_ecn(
            &ctx,
            &FitEcnArgs {
                input,
                m,
                k,
                init_k,
                dt,
                tick,
                lot,
            },
        ),
        Command::Simulate { episodes, policy } => commands::simulate(&ctx, episodes, policy),
        Command::Train { episodes } => commands::train_cmd(&ctx, episodes),
        Command::Calibrate { method, targets } => commands::calibrate(&ctx, method, targets),
        Command::Decompose { game } => commands::decompose(&ctx, &game),
        Command::Verify { only } => commands::verify(&ctx, only),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::MissingFile("x".into()).exit_code(), 2);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Invariant {
                module: "episode_sim",
                id: "sim.finite_pnl",
                detail: String::new()
            }
            .exit_code(),
            1
        );
        assert_eq!(CliError::CriteriaFailed(vec![1]).exit_code(), 1);
    }

    #[test]
    fn only_list_parses() {
        let cli = Cli::try_parse_from(["dealersim", "--seed", "1", "verify", "--only", "7,14"]).unwrap();
        assert!(matches!(cli.command, Command::Verify { only: Some(ref v) } if v == &[7, 14]));
    }
}
