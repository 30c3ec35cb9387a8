// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use steer_cli::commands::{cmd_compose, cmd_eval, cmd_gen_task, cmd_sweep, cmd_train};
use steer_cli::CliError;

/// Learn sparse affine interventions on the hidden activations of a frozen
/// feed-forward model.
///
/// Exit codes: 0 success, 1 i/o failure, 2 configuration error, 3 numeric
/// failure.
#[derive(Parser)]
#[command(name = "steer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (model, samples, target traces, sealed
    /// planted map) from a task spec.
    GenTask {
        /// Task spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; `task.json` is written there.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stack from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train over a grid of gamma, seed and step counts.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Cells trained in parallel [default: spec's `jobs`, else 1].
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compose two checkpoints in both orders and score them.
    Compose {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Evaluation task; give once or twice.
        #[arg(long = "task", required = true, num_args = 1)]
        tasks: Vec<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a task's held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Intervention strength in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// A closed pipe on stdout is not worth a panic.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn print<T: Serialize>(value: &T) {
    emit(&serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenTask { spec, out } => emit(&cmd_gen_task(&spec, &out)?.display().to_string()),
        Command::Train { config } => print(&cmd_train(&config)?),
        Command::Sweep { spec, jobs } => {
            let rows = cmd_sweep(&spec, jobs)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            emit(&format!("{} cells, {failed} failed", rows.len()));
        }
        Command::Compose { a, b, tasks, out } => {
            if tasks.len() > 2 {
                return Err(CliError::config("task", "at most two evaluation tasks"));
            }
            print(&cmd_compose(&a, &b, &tasks, out.as_deref())?)
        }
        Command::Eval {
            checkpoint,
            task,
            strength,
            out,
        } => print(&cmd_eval(&checkpoint, &task, strength, out.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
