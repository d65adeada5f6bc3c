use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Train and evaluate Pyramid Mixer sequential recommenders.
#[derive(Debug, Parser)]
#[command(name = "pymx", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.D=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run folders (overrides `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and index a raw dataset; writes the canonical TSV and vocabulary.
    Prep,
    /// Train with early stopping; writes checkpoint, log, metrics and cost.
    Train {
        /// Continue from a checkpoint that carries training state.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient check on the tiny model.
    Gradcheck {
        /// Number of random seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Train the full model and its ablations over the configured seeds.
    Ablate,
    /// Analytic parameter and MAC counts.
    Cost,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(err) => {
            let (class, code) = classify(&err);
            // One line, machine-parsable: `error[<class>]: <message>`.
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{class}]: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Exit code per error class: 2 config, 3 data or I/O, 4 divergence,
/// 5 unreadable or mismatched checkpoint, 1 anything else.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use pyramid_mixer::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => ("config", 2),
        Some(E::Data(_)) => ("data", 3),
        Some(E::Divergence(_)) => ("divergence", 4),
        Some(E::Format(_) | E::ConfigMismatch { .. }) => ("checkpoint", 5),
        Some(E::Io { .. }) => ("io", 3),
        _ => ("internal", 1),
    }
}
