//! Experiment lifecycle: command dispatch, config loading, metric emission.

pub mod config;
pub mod ib;
pub mod summarize;

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::SeedableRng;

pub use config::ExperimentConfig;
pub use ib::{verify_ib_bound, DiscreteJoint, IbReport};
pub use summarize::{summarize, summarize_text, write_summary, Summary};

use crate::envsim::sample_tasks;
use crate::meta::{self, Checkpoint, FileSink, TestMode};
use crate::{Error, Result};

/// A parsed CLI invocation.
#[derive(Clone, Debug)]
pub enum Command {
    Train {
        config: PathBuf,
        seed: Option<u64>,
        out: Option<PathBuf>,
    },
    Test {
        config: PathBuf,
        checkpoint: PathBuf,
        mode: Option<TestMode>,
        seed: Option<u64>,
    },
    Evaluate {
        checkpoint: PathBuf,
        tasks: PathBuf,
        episodes: usize,
    },
    VerifyIb {
        trials: usize,
    },
    Summarize {
        metrics: PathBuf,
    },
}

/// Execute a command; the return value is what `main` prints before exiting 0.
pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(seed) = seed {
                cfg.seed = *seed;
            }
            let train_cfg = cfg.to_train_config();
            let metrics_path = PathBuf::from(&cfg.paths.metrics);
            let mut sink = FileSink::create(&metrics_path)?;
            let ckpt = meta::meta_train(&train_cfg, &mut sink)?;
            let ckpt_path = out
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
            ckpt.save(&ckpt_path)?;
            Ok(format!(
                "meta-training done: checkpoint {}, metrics {}",
                ckpt_path.display(),
                metrics_path.display()
            ))
        }
        Command::Test {
            config,
            checkpoint,
            mode,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(seed) = seed {
                cfg.seed = *seed;
            }
            if let Some(mode) = mode {
                cfg.test.mode = *mode;
            }
            let ckpt = Checkpoint::load(checkpoint)?;
            let test_cfg = cfg.to_test_config();
            let task = sample_tasks(cfg.test.family, 1, cfg.test.task_seed)?[0];
            let metrics_path = PathBuf::from(&cfg.paths.metrics);
            let mut sink = FileSink::create(&metrics_path)?;
            let outcome = meta::meta_test(&test_cfg, &ckpt, &task, &mut sink)?;
            let last = outcome.episode_returns.last().copied().unwrap_or(f64::NAN);
            Ok(format!(
                "meta-test ({}) done: {} episodes, final return {:.4}, metrics {}",
                test_cfg.mode,
                outcome.episode_returns.len(),
                last,
                metrics_path.display()
            ))
        }
        Command::Evaluate {
            checkpoint,
            tasks,
            episodes,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let task_list = crate::envsim::read_tasks(tasks)?;
            if task_list.is_empty() {
                return Err(Error::InvalidArgument("task file is empty".into()));
            }
            let mut sink = meta::VecSink::default();
            let per_episode = meta::evaluate(&ckpt, &task_list, *episodes, &mut sink, "evaluate", 0)?;
            let mut out = String::from("episode,mean_return\n");
            for (i, r) in per_episode.iter().enumerate() {
                out.push_str(&format!("{},{}\n", i + 1, r));
            }
            Ok(out)
        }
        Command::VerifyIb { trials } => {
            let mut rng = StdRng::seed_from_u64(0);
            let mut max_violation = f64::NEG_INFINITY;
            let mut max_kl_gap = 0.0f64;
            for _ in 0..*trials {
                let joint = DiscreteJoint::random(3, 3, 2, &mut rng);
                let report = verify_ib_bound(&joint);
                max_violation = max_violation.max(-report.slack);
                max_kl_gap = max_kl_gap.max((report.slack - joint.expected_kl()).abs());
                if report.slack < -1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "bound violated: slack {}",
                        report.slack
                    )));
                }
                if (report.slack - joint.expected_kl()).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "slack does not match enumerated KL: {} vs {}",
                        report.slack,
                        joint.expected_kl()
                    )));
                }
            }
            Ok(format!(
                "ib bound holds over {trials} random joints (worst slack deficit {:.3e}, worst KL mismatch {:.3e})",
                max_violation, max_kl_gap
            ))
        }
        Command::Summarize { metrics } => {
            let summary = summarize(metrics)?;
            let out_path = write_summary(metrics, &summary)?;
            let mut out = summary.to_csv();
            if summary.warnings > 0 {
                out.push_str(&format!("# skipped {} malformed lines\n", summary.warnings));
            }
            out.push_str(&format!("# written to {}\n", out_path.display()));
            Ok(out)
        }
    }
}

/// Convenience used by tests: run `train` with an in-memory config.
pub fn train_with_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(Checkpoint, PathBuf)> {
    let train_cfg = cfg.to_train_config();
    let metrics_path = dir.join(&cfg.paths.metrics);
    let mut sink = FileSink::create(&metrics_path)?;
    let ckpt = meta::meta_train(&train_cfg, &mut sink)?;
    Ok((ckpt, metrics_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_ib_command_passes() {
        let out = run(&Command::VerifyIb { trials: 200 }).unwrap();
        assert!(out.contains("holds"), "{out}");
    }

    #[test]
    fn summarize_command_writes_a_table() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = dir.path().join("m.jsonl");
        let rec = serde_json::json!({
            "run_id": "r", "phase": "eval", "iteration": 0, "env_steps": 32,
            "task_id": 0, "episode_index": 1, "return": -3.0,
            "losses": {"embed": null, "actor": null, "q": null, "v": null},
            "belief_std_mean": null, "seed": 1
        });
        std::fs::write(&metrics, format!("{rec}\n")).unwrap();
        let out = run(&Command::Summarize {
            metrics: metrics.clone(),
        })
        .unwrap();
        assert!(out.contains("eval,1,1,-3,0"), "{out}");
        assert!(metrics.with_extension("summary.csv").exists());
    }
}
