mod commands;
mod config;
mod failure;
mod output;

use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use config::{CommonArgs, EngineArgs};

/// Sensitivity of distortion premia to protected covariates and the
/// KL-nearest measures that remove it.
#[derive(Parser, Debug)]
#[command(name = "dipricer", version)]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a joint dataset from a scenario.
    Simulate(SimulateArgs),
    /// Solve the requested measures on the covariate grid.
    Solve(SolveArgs),
    /// Turn solve output into table and curve CSV files.
    Report(ReportArgs),
    /// Select barycentre weights that balance the sensitivity reductions.
    Weights(WeightsArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Measure to solve, repeatable: P, insensitive[:i,j][:noexp],
    /// marginal:i, barycentre[:p1,p2], constrained_barycentre[:p1,p2].
    #[arg(long = "measure")]
    pub measures: Vec<String>,
    /// Weights for a bare `barycentre` or `constrained_barycentre`.
    #[arg(long)]
    pub pi: Option<String>,
    /// Weight the discrimination-free premium by P(D = d) instead of
    /// P(D = d | X = x).
    #[arg(long)]
    pub unconditional: bool,
    /// Skip the unaware/best-estimate/discrimination-free premia.
    #[arg(long)]
    pub no_compare: bool,
    /// Re-solve the first replicate of every node with the direct
    /// projection solver (needs n <= 4096).
    #[arg(long)]
    pub oracle_check: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding solve output; defaults to --out.
    #[arg(long)]
    pub input: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Final bracket width of the golden-section search over π₁.
    #[arg(long)]
    pub width: Option<f64>,
    /// Extra weight vectors to evaluate, repeatable (`0.2,0.8`).
    #[arg(long = "pi")]
    pub pi_list: Vec<String>,
    /// Also evaluate π₁ on an evenly spaced grid with this many intervals.
    #[arg(long)]
    pub scan: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Solve(a) => commands::solve(a),
        Command::Report(a) => commands::report(a),
        Command::Weights(a) => commands::weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
