//! `sbpu` command-line driver.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sbpu",
    version,
    about = "Federated-learning simulator with stochastic bidirectional parameter updates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config or run manifest
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "sbpu-out")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation and write metrics, bound reports and checkpoints
    RunFl(Common),
    /// Check the neighbourhood and client-divergence bounds
    VerifyBounds(Common),
    /// Run one privacy attack (lia, mia or ir)
    RunAttack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: String,
    },
    /// Estimate the optimality gap against the convergence bound
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Independent replicas averaged into the expectation
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SBPU_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunFl(c) => commands::run_fl(&c),
        Command::VerifyBounds(c) => commands::verify_bounds(&c),
        Command::RunAttack { common, attack } => commands::run_attack(&common, &attack),
        Command::Convergence { common, seeds } => commands::convergence(&common, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
