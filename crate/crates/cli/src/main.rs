use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gvu_cli::{parse_config_with, run_experiment, CliError, ExperimentKind, Overrides};

/// Runs GVU experiments from a JSON config.
#[derive(Parser)]
#[command(name = "gvu", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Iterate GVU steps and log each one.
    Run(Common),
    /// Repeat an experiment over values of one numeric config field.
    Sweep(Common),
    /// Estimate alignment, noise and bias of the update.
    Decompose(Common),
    /// Check the step-size inequality against a measured one-step gain.
    Inequality(Common),
    /// Measure verifier slop mass.
    Slop(Common),
    /// Implied potential of the mean update.
    Represent(Common),
    /// Budgeted trajectory and its self-improvement rate.
    Kappa(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the worker pool.
    #[arg(long)]
    threads: Option<usize>,
}

impl Verb {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Verb::Run(c) => (ExperimentKind::Run, c),
            Verb::Sweep(c) => (ExperimentKind::Sweep, c),
            Verb::Decompose(c) => (ExperimentKind::Decompose, c),
            Verb::Inequality(c) => (ExperimentKind::Inequality, c),
            Verb::Slop(c) => (ExperimentKind::Slop, c),
            Verb::Represent(c) => (ExperimentKind::Representation, c),
            Verb::Kappa(c) => (ExperimentKind::Kappa, c),
        }
    }
}

fn execute(kind: ExperimentKind, args: Common) -> Result<gvu_cli::RunManifest, CliError> {
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(CliError::validation("--threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::validation("--threads", e.to_string()))?;
    }
    let overrides = Overrides {
        seed: args.seed,
        kind: Some(kind),
    };
    let cfg = parse_config_with(&args.config, &overrides)?;
    run_experiment(&cfg, &args.out)
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().verb.split();
    match execute(kind, args) {
        Ok(manifest) => {
            println!(
                "{}",
                serde_json::to_string(&manifest).expect("manifest serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
