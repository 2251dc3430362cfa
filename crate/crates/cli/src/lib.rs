//! Command-line layer over `sae-core`: CSV input, JSON artifacts and run manifests.

pub mod artifact;
pub mod commands;
pub mod error;
pub mod input;
pub mod manifest;

use clap::{Parser, Subcommand};

use commands::{FitArgs, GenerateArgs, PredictArgs, RatioArgs, SimulateArgs};
pub use error::{CliError, CliResult};

/// Empirical Bayes small area estimation in NEF-QVF mixed models.
#[derive(Debug, Parser)]
#[command(name = "sae", version)]
pub struct Cli {
    /// Worker threads for replication loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit (beta, nu) by GT estimating equations or marginal ML.
    Fit(FitArgs),
    /// EB predictions with CMSE, unconditional MSE and RD per area.
    Predict(PredictArgs),
    /// Monte Carlo table of true CMSE and RB/CV of the CMSE estimators.
    Simulate(SimulateArgs),
    /// Ratio curves of conditional to unconditional MSE terms.
    Ratio(RatioArgs),
    /// Synthetic area data at known hyperparameters.
    Generate(GenerateArgs),
}

/// Runs one parsed command. Thread setup is left to the caller.
pub fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Predict(a) => commands::cmd_predict(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
        Command::Ratio(a) => commands::cmd_ratio(a),
        Command::Generate(a) => commands::cmd_generate(a),
    }
}
