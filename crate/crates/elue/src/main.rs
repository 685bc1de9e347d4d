use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use elue::harness::{self, Command};
use elue::meta::TestMode;

#[derive(Parser)]
#[command(name = "elue", about = "Belief-conditional off-policy meta-RL at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Meta-train on a task family and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Meta-test a checkpoint on one unseen task.
    Test {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// inference | no_bel_update | bel_grad | no_bel_grad | scratch | no_emb
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out a checkpoint with mean actions on a task file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task list: family,task_id,goal_x,goal_y,rotation_angle,seed per line.
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        episodes: usize,
    },
    /// Check the discrete information-bottleneck bound on random joints.
    VerifyIb {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Aggregate a metrics file into per-episode statistics.
    Summarize {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::Train { config, seed, out } => Command::Train { config, seed, out },
        Sub::Test {
            config,
            checkpoint,
            mode,
            seed,
        } => {
            let mode = match mode.as_deref().map(str::parse::<TestMode>).transpose() {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            Command::Test {
                config,
                checkpoint,
                mode,
                seed,
            }
        }
        Sub::Evaluate {
            checkpoint,
            tasks,
            episodes,
        } => Command::Evaluate {
            checkpoint,
            tasks,
            episodes,
        },
        Sub::VerifyIb { trials } => Command::VerifyIb { trials },
        Sub::Summarize { metrics } => Command::Summarize { metrics },
    };
    match harness::run(&command) {
        Ok(output) => {
            println!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
