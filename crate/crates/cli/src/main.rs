mod commands;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ilearn", version, about = "Train and evaluate the bilevel learning harnesses")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML config; omitted keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress the per-phase summary lines.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Kind {
    Maze,
    Mtsp,
    PgoTrajectory,
}

#[derive(Subcommand)]
enum Command {
    /// Hypergradient routes against analytic oracles.
    BloSelftest,
    /// Train the A* heuristic network on generated mazes.
    AstarTrain,
    /// Compare a heuristic network against the Euclidean heuristic.
    AstarEval,
    /// Learn the plant parameter and state denoiser through MPC.
    MpcTrain,
    /// Learn the odometry front-end through the pose-graph back-end.
    PgoTrain,
    /// Train the MTSP allocation network.
    MtspTrain,
    /// Compare an allocation network with the angular-sector baseline.
    MtspEval,
    /// Gradient variance of the score-function and control-variate estimators.
    EstimatorBench,
    /// Write instance files.
    Generate { kind: Kind },
}

fn main() {
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::BloSelftest => commands::blo_selftest(&common),
        Command::AstarTrain => commands::astar_train(&common),
        Command::AstarEval => commands::astar_eval(&common),
        Command::MpcTrain => commands::mpc_train(&common),
        Command::PgoTrain => commands::pgo_train(&common),
        Command::MtspTrain => commands::mtsp_train(&common),
        Command::MtspEval => commands::mtsp_eval(&common),
        Command::EstimatorBench => commands::estimator_bench(&common),
        Command::Generate { kind } => commands::generate(&common, kind),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
