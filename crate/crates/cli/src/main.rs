use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hydrolattice::pipeline::{self, Pipeline, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "hydrolattice", version, about = "Stochastic hydro dispatch on a recombining price lattice")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the optimal dispatch plan.
    Solve(RunArgs),
    /// Solve and report water values per hour.
    Watervalues(RunArgs),
    /// Solve, fit dispatch rules and replay realised prices.
    Backtest(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Driver seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the iteration log.
    #[arg(long)]
    verbose: bool,
}

fn execute(pipeline: Pipeline, args: &RunArgs) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.verbose |= args.verbose;
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let summary = pipeline::run(&cfg, pipeline, &out)?;
    println!(
        "{}: objective {} after {} iterations ({:.3}s), artifacts in {}",
        summary.pipeline,
        summary.objective,
        summary.iterations,
        summary.timings.total_seconds,
        out.display()
    );
    if let Some(w) = summary.backtest_wealth {
        println!("backtest wealth {w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (pipeline, args) = match &cli.command {
        Command::Solve(a) => (Pipeline::Solve, a),
        Command::Watervalues(a) => (Pipeline::Watervalues, a),
        Command::Backtest(a) => (Pipeline::Backtest, a),
    };
    match execute(pipeline, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
