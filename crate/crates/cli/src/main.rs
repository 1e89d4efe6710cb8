use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Quadrotor aerobatics workbench: train, evaluate and fly policies.
///
/// Exit codes: 0 success, 1 user error (bad arguments, configuration,
/// script or checkpoint), 2 internal error (including a failed check).
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Debug, Parser)]
#[command(name = "aerobat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON run configuration; every field has a default.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `ppo.gamma=0.95`.
    /// Repeatable; applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Backbone only: no FiLM, single value head.
    Backbone,
    /// Backbone plus FiLM command conditioning.
    Film,
    /// Backbone plus one value head per task.
    Multihead,
    /// FiLM and multi-head critic.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backbone {
    Mlp,
    Emlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    All,
    Hover,
    Flip,
    Roll,
    Rotate,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy with PPO into a fresh run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (metrics/, checkpoints/, logs/, config.json).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Reuse a non-empty run directory.
        #[arg(long)]
        force: bool,
        /// Seed (overrides the configuration).
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation row: which of FiLM / multi-head critic to enable.
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        /// Network backbone.
        #[arg(long, value_enum)]
        backbone: Option<Backbone>,
    },
    /// Evaluate a checkpoint over command sweeps and write SR/SCD reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint manifest (`*.json`) written by `train`.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Task to evaluate.
        #[arg(long, value_enum, default_value = "all")]
        task: TaskArg,
        /// Episodes per task (default: eval.episodes from the configuration).
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluation seed (default: the configuration seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for report.json, report.csv and episodes.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Also write one JSONL trajectory per episode under <out>/logs.
        #[arg(long)]
        logs: bool,
    },
    /// Fly a maneuver script and record the trajectory and trigger firings.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint manifest to fly with.
        #[arg(long, value_name = "FILE", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Fly the ideal reference pilot instead of a policy.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Script file, or the name of a built-in script.
        #[arg(long, value_name = "FILE|NAME")]
        script: String,
        /// Output directory for trajectory.jsonl and triggers.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Seed for the initial heading.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy steps at which to inject manual trigger events
        /// (comma-separated). Without it, a waiting manual step reads one
        /// line from stdin per event.
        #[arg(long, value_delimiter = ',', value_name = "STEPS")]
        manual_at: Option<Vec<usize>>,
        /// Seconds to keep flying after the last step fires.
        #[arg(long, default_value_t = 3.0)]
        tail: f64,
        /// Hard limit on the run length, s.
        #[arg(long, default_value_t = 60.0)]
        max_time: f64,
    },
    /// Serve the live simulator over WebSocket (ws://ADDR/ws).
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint manifest to fly with.
        #[arg(long, value_name = "FILE", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Fly the ideal reference pilot instead of a policy.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Listen address (default: service.addr from the configuration).
        #[arg(long, value_name = "HOST:PORT")]
        addr: Option<String>,
        /// Simulation speed relative to wall clock, in (0, 4].
        #[arg(long)]
        timescale: Option<f64>,
        /// Seed for the initial heading.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the symmetry suite (layers, network, dynamics, tasks, rewards)
    /// and print a JSON report.
    CheckEquivariance {
        /// Random (input, angle) pairs per network check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Random (state, angle) pairs per dynamics / task check.
        #[arg(long, default_value_t = 1000)]
        state_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// List the built-in maneuver scripts.
    Scripts {
        /// Print one script as JSON instead of the list.
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
    },
}

/// Failure classified by exit code.
pub enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn user(e: impl Into<anyhow::Error>) -> Self {
        Failure::User(e.into())
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Failure::Internal(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
