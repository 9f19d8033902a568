use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use demoaug_cli::commands::{self, TrainOptions};
use demoaug_cli::{plot, CliError, RunConfig};
use demoaug_core::agent::BufferSource;
use demoaug_core::sim::{TaskKind, TaskSpec};

#[derive(Parser)]
#[command(name = "demoaug", version, about = "Single-demonstration augmented reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record a demonstration with the built-in scripted expert.
    RecordScripted {
        #[arg(long)]
        task: TaskKind,
        /// Record on an instance sampled from this seed instead of the
        /// task's reference instance.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the simulator over WebSocket for teleoperated recording.
    Serve {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        /// Directory recorded demonstrations are saved under.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate successful episodes from one demonstration.
    Augment {
        #[arg(long)]
        demo: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent and stream metrics to OUT/metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        buffer_source: Option<BufferSource>,
        #[arg(long)]
        preplay: bool,
        #[arg(long)]
        no_her: bool,
        #[arg(long)]
        demo: Option<PathBuf>,
        /// Policy checkpoint used by the TrainedAgentDemo buffer source.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Fill the `seconds` column with wall-clock time.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Greedy evaluation of a policy checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file to append the result to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot success rate against epoch from one or more metrics files.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::RecordScripted { task, seed, out } => {
            let demo = commands::record_scripted(task, seed, &out)?;
            println!("recorded {} waypoints to {}", demo.waypoints.len(), out.display());
        }
        Command::Serve { task, seed, addr, out } => {
            let session = demoaug_teleop::Session::new(TaskSpec::new(task), seed, out)
                .map_err(|e| CliError::config(format!("task: {e}")))?;
            let rt = tokio::runtime::Builder::new_current_thread().enable_io().build()?;
            rt.block_on(demoaug_teleop::serve(&addr, session)).map_err(|e| match e {
                demoaug_teleop::TeleopError::Bind { .. } => CliError::config(e.to_string()),
                other => CliError::Runtime(other.into()),
            })?;
        }
        Command::Augment { demo, count, seed, out } => {
            let report = commands::augment(&demo, count, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Train { config, task, seed, epochs, buffer_source, preplay, no_her, demo, policy, out, resume, wall_clock } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path, task)?,
                None => RunConfig::new(task.unwrap_or(TaskKind::Push)),
            };
            if let Some(s) = seed {
                cfg.agent.seed = s;
            }
            if let Some(e) = epochs {
                cfg.agent.epochs = e;
            }
            if let Some(b) = buffer_source {
                cfg.agent.buffer_source = b;
            }
            cfg.agent.preplay_enabled |= preplay;
            cfg.agent.her_enabled &= !no_her;
            let rows = commands::train(&TrainOptions { config: cfg, demo, policy, out_dir: out.clone(), resume, wall_clock })?;
            match rows.last() {
                Some(r) => println!("trained {} epochs; final success rate {:.3}", rows.len(), r.success_rate),
                None => println!("no epochs run; initial checkpoint in {}", out.display()),
            }
        }
        Command::Eval { checkpoint, task, episodes, seed, out } => {
            let rate = commands::eval(&checkpoint, task, episodes, seed, out.as_deref())?;
            println!("success_rate {rate}");
        }
        Command::Plot { metrics, out } => {
            let curves = plot::plot(&metrics, &out)?;
            println!("plotted {} variant(s) to {}", curves.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
