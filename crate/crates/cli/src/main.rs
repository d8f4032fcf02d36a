//! Experiment runner for the attentive message-passing federated learning
//! simulator.
//!
//! Exit codes: 0 ok, 2 config error, 3 runtime/numerical error.

mod config;
mod output;
mod parallel;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedamp_core::federation::{
    oracle_equivalence_check, run_experiment, ClientRunner, RoundContext, SequentialRunner,
};
use fedamp_core::Error;

use config::{build_experiment, parse_config, Experiment};
use parallel::RayonRunner;

#[derive(Parser)]
#[command(name = "fedamp", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, collab.json, summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel client solves; never changes the results.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the built-in practical non-IID data presets.
    Presets,
    /// Check the message-passing round against the dense reference method on
    /// random quadratic instances.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => run(&config, seed, out, threads),
        Command::Validate { config } => {
            load_config(&config)?;
            println!("config OK: {}", config.display());
            Ok(())
        }
        Command::Presets => {
            presets();
            Ok(())
        }
        Command::OracleCheck { seed, instances } => oracle_check(seed, instances),
    }
}

fn load_config(path: &Path) -> Result<config::ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(Failure::config)
}

fn run(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: usize,
) -> Result<(), Failure> {
    let config = load_config(config_path)?;
    let experiment = build_experiment(&config, seed).map_err(Failure::config)?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&config.out_dir));

    let state = execute(&experiment, threads)?;

    fs::create_dir_all(&out_dir).map_err(Failure::runtime)?;
    let csv = output::metrics_csv(&state.history);
    fs::write(out_dir.join("metrics.csv"), csv).map_err(Failure::runtime)?;

    let collab = output::final_collab_json(&state, &experiment.algorithm, &experiment.clients)
        .map_err(Failure::runtime)?;
    fs::write(out_dir.join("collab.json"), collab).map_err(Failure::runtime)?;

    let summary = output::summary(&config.algorithm, experiment.seed, &state)
        .map_err(Failure::runtime)?;
    let summary_json = serde_json::to_string_pretty(&summary).map_err(Failure::runtime)?;
    fs::write(out_dir.join("summary.json"), &summary_json).map_err(Failure::runtime)?;

    let final_g = summary
        .final_g
        .map(|g| format!("{g:.6}"))
        .unwrap_or_else(|| "n/a".into());
    match summary.bmta {
        Some(b) => println!(
            "{}: {} rounds, seed {}, BMTA {:.4} (round {}), final G {final_g}",
            summary.algorithm,
            summary.rounds,
            summary.seed,
            b,
            summary.bmta_round.unwrap_or(0),
        ),
        None => println!(
            "{}: {} rounds, seed {}, final G {final_g}",
            summary.algorithm, summary.rounds, summary.seed
        ),
    }
    Ok(())
}

fn execute(
    experiment: &Experiment,
    threads: usize,
) -> Result<fedamp_core::federation::FederationState, Failure> {
    let sequential = SequentialRunner;
    let rayon_runner = if threads > 1 {
        Some(RayonRunner::new(threads).map_err(Failure::runtime)?)
    } else {
        None
    };
    let runner: &dyn ClientRunner = match &rayon_runner {
        Some(r) => r,
        None => &sequential,
    };
    let ctx = RoundContext {
        algorithm: &experiment.algorithm,
        clients: &experiment.clients,
        faults: &experiment.faults,
        solver: &experiment.solver,
        master_seed: experiment.seed,
        runner,
        record_collab: experiment.record_collab,
    };
    run_experiment(&ctx, experiment.rounds).map_err(|e| match e {
        Error::Config(_) | Error::Domain(_) => Failure::config(e),
        other => Failure::runtime(other),
    })
}

fn presets() {
    println!("available practical non-IID presets:");
    println!("  emnist62      62 clients, groups 10/26/26, train 1000/700/400, test 100");
    println!("  mnist100      100 clients, 5 groups of 20, 2 dominating classes each,");
    println!("                train 500/400/300/200/100, test 100");
    println!("  fmnist100     same layout as mnist100, train 600/500/400/300/200");
    println!("  cifar100_100  100 clients, 20 groups of 5, dominating classes from a");
    println!("                superclass_file (JSON array: class index -> group), train");
    println!("                500/400/300/200/100 per 20-client band, test 100");
}

fn oracle_check(seed: u64, instances: usize) -> Result<(), Failure> {
    const TOLERANCE: f64 = 1e-10;
    let deviation =
        oracle_equivalence_check(seed, instances).map_err(Failure::runtime)?;
    let pass = deviation < TOLERANCE;
    println!(
        "oracle-check: {instances} instances, max per-entry deviation {deviation:.3e} (tolerance {TOLERANCE:.0e}) ... {}",
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "message passing and dense reference diverged by {deviation:.3e}"
        )))
    }
}
