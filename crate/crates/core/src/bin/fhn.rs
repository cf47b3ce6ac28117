use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fhn_control::harness::{run, Command};
use fhn_control::scenario::{load_scenario, Scenario};

/// Optimal control of the stochastic FitzHugh-Nagumo system.
///
/// Set FHN_THREADS to cap the number of worker threads.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Integrate the uncontrolled system and export the trajectory.
    Simulate(Common),
    /// Run the regularized fixed-point optimizer.
    Optimize(Common),
    /// Compare adjoint gradients with finite differences of the cost.
    VerifyGradient(Common),
    /// Check the structural invariants of every module.
    VerifyInvariants(Common),
    /// Duality-gap, strong-convergence and margin sweeps.
    ConvergenceStudy(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Optimize(a) => (Command::Optimize, a),
        Sub::VerifyGradient(a) => (Command::VerifyGradient, a),
        Sub::VerifyInvariants(a) => (Command::VerifyInvariants, a),
        Sub::ConvergenceStudy(a) => (Command::ConvergenceStudy, a),
    };

    if let Ok(threads) = std::env::var("FHN_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: FHN_THREADS must be a positive integer, got `{threads}`");
                return ExitCode::from(2);
            }
        }
    }

    let scenario = match &args.scenario {
        Some(path) => load_scenario(path),
        None => Ok(Scenario::default()),
    };
    let mut scenario = match scenario {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }

    match run(&scenario, command, &args.out) {
        Ok(record) => {
            for (k, v) in &record.summary {
                println!("{k}: {v}");
            }
            println!("artifacts: {}", args.out.display());
            match record.failure {
                None => ExitCode::SUCCESS,
                Some(name) => {
                    eprintln!("FAILED: {name}");
                    ExitCode::FAILURE
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
