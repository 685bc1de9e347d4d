//! Line-based experiment configuration.
//!
//! Format: `[section]` headers with `key = value` lines, `#` comments,
//! booleans as true/false. Unknown sections or keys are rejected with the
//! offending line number. Any key can be overridden from the environment via
//! `ELUE_<SECTION>_<KEY>`.

use std::str::FromStr;

use crate::agent::Hyperparams;
use crate::envsim::TaskFamily;
use crate::meta::{MetaTestConfig, MetaTrainConfig, TestMode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub tasks_per_iteration: usize,
    pub collection_steps: usize,
    pub training_steps: usize,
    pub total_iterations: usize,
    pub initial_sampling_steps: usize,
    pub embedding_pretrain_steps: usize,
    pub no_embedding: bool,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub save_buffers: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            tasks_per_iteration: 8,
            collection_steps: 64,
            training_steps: 250,
            total_iterations: 80,
            initial_sampling_steps: 64,
            embedding_pretrain_steps: 2000,
            no_embedding: false,
            eval_every: 10,
            eval_episodes: 2,
            save_buffers: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSection {
    pub mode: TestMode,
    pub family: TaskFamily,
    pub task_seed: u64,
    pub collection_steps: usize,
    pub training_steps: usize,
    pub total_iterations: usize,
    pub belief_freeze_after_initial: bool,
}

impl Default for TestSection {
    fn default() -> Self {
        TestSection {
            mode: TestMode::Inference,
            family: TaskFamily::RadialGoal,
            task_seed: 1000,
            collection_steps: 64,
            training_steps: 100,
            total_iterations: 10,
            belief_freeze_after_initial: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsSection {
    pub checkpoint: String,
    pub metrics: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            checkpoint: "elue.ckpt".into(),
            metrics: "metrics.jsonl".into(),
        }
    }
}

/// Command-agnostic superset of the meta-train and meta-test configurations
/// plus output paths and task-family parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub run_id: String,
    pub family: TaskFamily,
    pub n_train_tasks: usize,
    pub n_eval_tasks: usize,
    pub hyper: Hyperparams,
    pub train: TrainSection,
    pub test: TestSection,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            run_id: "run".into(),
            family: TaskFamily::RadialGoal,
            n_train_tasks: 16,
            n_eval_tasks: 8,
            hyper: Hyperparams::default(),
            train: TrainSection::default(),
            test: TestSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn parse_as<T: FromStr>(section: &str, key: &str, value: &str, line: usize) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!(
            "line {line}: bad value `{value}` for {section}.{key}"
        ))
    })
}

impl ExperimentConfig {
    /// All (section, key, current-value) triples, in serialization order.
    fn fields(&self) -> Vec<(&'static str, &'static str, String)> {
        let h = &self.hyper;
        vec![
            ("run", "seed", self.seed.to_string()),
            ("run", "id", self.run_id.clone()),
            ("env", "family", self.family.to_string()),
            ("env", "n_train_tasks", self.n_train_tasks.to_string()),
            ("env", "n_eval_tasks", self.n_eval_tasks.to_string()),
            ("hyper", "gamma", h.gamma.to_string()),
            ("hyper", "beta", h.beta.to_string()),
            ("hyper", "polyak", h.polyak.to_string()),
            ("hyper", "lr_embed", h.lr_embed.to_string()),
            ("hyper", "lr_actor", h.lr_actor.to_string()),
            ("hyper", "lr_q", h.lr_q.to_string()),
            ("hyper", "lr_v", h.lr_v.to_string()),
            ("hyper", "k_min", h.k_min.to_string()),
            ("hyper", "k_max", h.k_max.to_string()),
            (
                "hyper",
                "targets_per_context",
                h.targets_per_context.to_string(),
            ),
            ("hyper", "meta_batch", h.meta_batch.to_string()),
            (
                "train",
                "tasks_per_iteration",
                self.train.tasks_per_iteration.to_string(),
            ),
            (
                "train",
                "collection_steps",
                self.train.collection_steps.to_string(),
            ),
            (
                "train",
                "training_steps",
                self.train.training_steps.to_string(),
            ),
            (
                "train",
                "total_iterations",
                self.train.total_iterations.to_string(),
            ),
            (
                "train",
                "initial_sampling_steps",
                self.train.initial_sampling_steps.to_string(),
            ),
            (
                "train",
                "embedding_pretrain_steps",
                self.train.embedding_pretrain_steps.to_string(),
            ),
            ("train", "no_embedding", self.train.no_embedding.to_string()),
            ("train", "eval_every", self.train.eval_every.to_string()),
            ("train", "eval_episodes", self.train.eval_episodes.to_string()),
            ("train", "save_buffers", self.train.save_buffers.to_string()),
            ("test", "mode", self.test.mode.to_string()),
            ("test", "family", self.test.family.to_string()),
            ("test", "task_seed", self.test.task_seed.to_string()),
            (
                "test",
                "collection_steps",
                self.test.collection_steps.to_string(),
            ),
            (
                "test",
                "training_steps",
                self.test.training_steps.to_string(),
            ),
            (
                "test",
                "total_iterations",
                self.test.total_iterations.to_string(),
            ),
            (
                "test",
                "belief_freeze_after_initial",
                self.test.belief_freeze_after_initial.to_string(),
            ),
            ("paths", "checkpoint", self.paths.checkpoint.clone()),
            ("paths", "metrics", self.paths.metrics.clone()),
        ]
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        match (section, key) {
            ("run", "seed") => self.seed = parse_as(section, key, value, line)?,
            ("run", "id") => self.run_id = value.to_string(),
            ("env", "family") => self.family = parse_family(value, line)?,
            ("env", "n_train_tasks") => self.n_train_tasks = parse_as(section, key, value, line)?,
            ("env", "n_eval_tasks") => self.n_eval_tasks = parse_as(section, key, value, line)?,
            ("hyper", "gamma") => self.hyper.gamma = parse_as(section, key, value, line)?,
            ("hyper", "beta") => self.hyper.beta = parse_as(section, key, value, line)?,
            ("hyper", "polyak") => self.hyper.polyak = parse_as(section, key, value, line)?,
            ("hyper", "lr_embed") => self.hyper.lr_embed = parse_as(section, key, value, line)?,
            ("hyper", "lr_actor") => self.hyper.lr_actor = parse_as(section, key, value, line)?,
            ("hyper", "lr_q") => self.hyper.lr_q = parse_as(section, key, value, line)?,
            ("hyper", "lr_v") => self.hyper.lr_v = parse_as(section, key, value, line)?,
            ("hyper", "k_min") => self.hyper.k_min = parse_as(section, key, value, line)?,
            ("hyper", "k_max") => self.hyper.k_max = parse_as(section, key, value, line)?,
            ("hyper", "targets_per_context") => {
                self.hyper.targets_per_context = parse_as(section, key, value, line)?
            }
            ("hyper", "meta_batch") => self.hyper.meta_batch = parse_as(section, key, value, line)?,
            ("train", "tasks_per_iteration") => {
                self.train.tasks_per_iteration = parse_as(section, key, value, line)?
            }
            ("train", "collection_steps") => {
                self.train.collection_steps = parse_as(section, key, value, line)?
            }
            ("train", "training_steps") => {
                self.train.training_steps = parse_as(section, key, value, line)?
            }
            ("train", "total_iterations") => {
                self.train.total_iterations = parse_as(section, key, value, line)?
            }
            ("train", "initial_sampling_steps") => {
                self.train.initial_sampling_steps = parse_as(section, key, value, line)?
            }
            ("train", "embedding_pretrain_steps") => {
                self.train.embedding_pretrain_steps = parse_as(section, key, value, line)?
            }
            ("train", "no_embedding") => {
                self.train.no_embedding = parse_bool(section, key, value, line)?
            }
            ("train", "eval_every") => self.train.eval_every = parse_as(section, key, value, line)?,
            ("train", "eval_episodes") => {
                self.train.eval_episodes = parse_as(section, key, value, line)?
            }
            ("train", "save_buffers") => {
                self.train.save_buffers = parse_bool(section, key, value, line)?
            }
            ("test", "mode") => {
                self.test.mode = value
                    .parse()
                    .map_err(|_| Error::Config(format!("line {line}: unknown test mode `{value}`")))?
            }
            ("test", "family") => self.test.family = parse_family(value, line)?,
            ("test", "task_seed") => self.test.task_seed = parse_as(section, key, value, line)?,
            ("test", "collection_steps") => {
                self.test.collection_steps = parse_as(section, key, value, line)?
            }
            ("test", "training_steps") => {
                self.test.training_steps = parse_as(section, key, value, line)?
            }
            ("test", "total_iterations") => {
                self.test.total_iterations = parse_as(section, key, value, line)?
            }
            ("test", "belief_freeze_after_initial") => {
                self.test.belief_freeze_after_initial = parse_bool(section, key, value, line)?
            }
            ("paths", "checkpoint") => self.paths.checkpoint = value.to_string(),
            ("paths", "metrics") => self.paths.metrics = value.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "line {line}: unknown key `{key}` in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header")))?;
                if !KNOWN_SECTIONS.contains(&name) && name != "paths" {
                    return Err(Error::Config(format!(
                        "line {line_no}: unknown section [{name}]"
                    )));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`"))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {line_no}: key outside any section"
                )));
            }
            cfg.set(&section, key.trim(), value.trim(), line_no)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.fields() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// `ELUE_<SECTION>_<KEY>` environment variables override config values.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        let keys: Vec<(&'static str, &'static str)> = self
            .fields()
            .into_iter()
            .map(|(s, k, _)| (s, k))
            .collect();
        for (section, key) in keys {
            let var = format!(
                "ELUE_{}_{}",
                section.to_uppercase(),
                key.to_uppercase()
            );
            if let Ok(value) = std::env::var(&var) {
                self.set(section, key, &value, 0)
                    .map_err(|e| Error::Config(format!("env override {var}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            family: self.family,
            n_train_tasks: self.n_train_tasks,
            n_eval_tasks: self.n_eval_tasks,
            tasks_per_iteration: self.train.tasks_per_iteration,
            collection_steps: self.train.collection_steps,
            training_steps: self.train.training_steps,
            total_iterations: self.train.total_iterations,
            initial_sampling_steps: self.train.initial_sampling_steps,
            embedding_pretrain_steps: self.train.embedding_pretrain_steps,
            no_embedding: self.train.no_embedding,
            eval_every: self.train.eval_every,
            eval_episodes: self.train.eval_episodes,
            save_buffers: self.train.save_buffers,
            hyper: self.hyper,
            seed: self.seed,
            run_id: self.run_id.clone(),
        }
    }

    pub fn to_test_config(&self) -> MetaTestConfig {
        MetaTestConfig {
            mode: self.test.mode,
            collection_steps: self.test.collection_steps,
            training_steps: self.test.training_steps,
            total_iterations: self.test.total_iterations,
            belief_freeze_after_initial: self.test.belief_freeze_after_initial,
            hyper: self.hyper,
            seed: self.seed,
            run_id: self.run_id.clone(),
        }
    }
}

const KNOWN_SECTIONS: [&str; 5] = ["run", "env", "hyper", "train", "test"];

fn parse_family(value: &str, line: usize) -> Result<TaskFamily> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: unknown task family `{value}`")))
}

fn parse_bool(section: &str, key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: {section}.{key} must be true or false, got `{value}`"
        ))),
    }
}
