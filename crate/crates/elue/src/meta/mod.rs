//! Meta-training and meta-testing orchestration.
//!
//! Meta-training alternates data collection (acting with the current policy
//! while updating the per-task belief every step) with gradient phases over
//! the replay buffers, after an initial sampling phase and an initial
//! embedding-training phase. Meta-testing runs on a single unseen task with
//! the embedding frozen and supports the adaptation-mode ablations:
//! belief-only inference, frozen-prior beliefs, parameter updates with and
//! without free belief copies, training from scratch, and the no-embedding
//! variant.

pub mod checkpoint;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::SeedableRng;

pub use checkpoint::{belief_from_segment, belief_segment, Checkpoint, Container, Segment};
pub use metrics::{FileSink, Losses, MetricRecord, MetricsSink, NullSink, TeeSink, VecSink};

use crate::agent::{
    ActMode, ActorNoise, AgentConfig, AgentNets, BeliefSource, Hyperparams, RlBatch, StepReport,
    TrainStepOpts, BELIEF_PARAM,
};
use crate::embed::{pretrain_embedding, BeliefState, EmbedConfig, EmbedNets, PretrainOpts};
use crate::envsim::{reset, sample_tasks, step, TaskFamily, TaskSpec, Transition};
use crate::ndiff::{adam_step, AdamConfig, ParameterSet, Tensor};
use crate::replay::TaskBuffer;
use crate::{Error, Result};

/// Meta-training configuration.
#[derive(Clone, Debug)]
pub struct MetaTrainConfig {
    pub family: TaskFamily,
    pub n_train_tasks: usize,
    pub n_eval_tasks: usize,
    pub tasks_per_iteration: usize,
    /// Environment steps collected per selected task per iteration.
    pub collection_steps: usize,
    /// Gradient steps per iteration.
    pub training_steps: usize,
    pub total_iterations: usize,
    /// Environment steps collected per task before anything is trained.
    pub initial_sampling_steps: usize,
    pub embedding_pretrain_steps: usize,
    /// Train the no-embedding ablation: beliefs stay at the prior and the
    /// embedding loss is never computed.
    pub no_embedding: bool,
    /// Evaluate on held-out tasks every this many iterations (0 = final only).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub save_buffers: bool,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub run_id: String,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            family: TaskFamily::RadialGoal,
            n_train_tasks: 16,
            n_eval_tasks: 8,
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
            hyper: Hyperparams::default(),
            seed: 1,
            run_id: "train".into(),
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_tasks == 0
            || self.tasks_per_iteration == 0
            || self.collection_steps == 0
            || self.initial_sampling_steps == 0
        {
            return Err(Error::Config(
                "meta-train counts must be >= 1 (iterations may be 0)".into(),
            ));
        }
        self.hyper.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Adaptation modes for meta-testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestMode {
    /// Belief updates only; no gradient steps.
    Inference,
    /// Belief pinned to the prior; no gradient steps.
    NoBelUpdate,
    /// Frozen belief copied per network and optimized jointly with the
    /// network parameters.
    BelGrad,
    /// Frozen belief as a plain input; only network parameters update.
    NoBelGrad,
    /// Fresh agent trained from zero without belief information.
    Scratch,
    /// Agent pretrained without the embedding; beliefs stay at the prior.
    NoEmb,
}

impl fmt::Display for TestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TestMode::Inference => "inference",
            TestMode::NoBelUpdate => "no_bel_update",
            TestMode::BelGrad => "bel_grad",
            TestMode::NoBelGrad => "no_bel_grad",
            TestMode::Scratch => "scratch",
            TestMode::NoEmb => "no_emb",
        };
        f.write_str(s)
    }
}

impl FromStr for TestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(TestMode::Inference),
            "no_bel_update" => Ok(TestMode::NoBelUpdate),
            "bel_grad" => Ok(TestMode::BelGrad),
            "no_bel_grad" => Ok(TestMode::NoBelGrad),
            "scratch" => Ok(TestMode::Scratch),
            "no_emb" => Ok(TestMode::NoEmb),
            other => Err(Error::Config(format!("unknown test mode `{other}`"))),
        }
    }
}

impl TestMode {
    /// Modes whose belief input is always the prior.
    pub fn prior_belief(&self) -> bool {
        matches!(self, TestMode::NoBelUpdate | TestMode::Scratch | TestMode::NoEmb)
    }

    /// Modes that run gradient steps in meta-testing.
    pub fn updates_parameters(&self) -> bool {
        matches!(
            self,
            TestMode::BelGrad | TestMode::NoBelGrad | TestMode::Scratch | TestMode::NoEmb
        )
    }
}

/// Meta-testing configuration.
#[derive(Clone, Debug)]
pub struct MetaTestConfig {
    pub mode: TestMode,
    pub collection_steps: usize,
    pub training_steps: usize,
    pub total_iterations: usize,
    /// Freeze the belief once the initial sampling phase ends.
    pub belief_freeze_after_initial: bool,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub run_id: String,
}

impl Default for MetaTestConfig {
    fn default() -> Self {
        MetaTestConfig {
            mode: TestMode::Inference,
            collection_steps: 64,
            training_steps: 100,
            total_iterations: 10,
            belief_freeze_after_initial: true,
            hyper: Hyperparams::default(),
            seed: 1,
            run_id: "test".into(),
        }
    }
}

impl MetaTestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collection_steps == 0 {
            return Err(Error::Config("test collection_steps must be >= 1".into()));
        }
        self.hyper.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Independent deterministic RNG streams derived from one seed.
fn sub_rng(seed: u64, stream: u64) -> StdRng {
    // splitmix64 finalizer over seed ^ stream-constant
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    StdRng::seed_from_u64(x)
}

const STREAM_INIT: u64 = 1;
const STREAM_COLLECT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TRAIN_TASKS: u64 = 5;
const STREAM_EVAL_TASKS: u64 = 6;

struct Emitter<'a> {
    sink: &'a mut dyn MetricsSink,
    run_id: String,
    seed: u64,
    env_steps: u64,
}

impl Emitter<'_> {
    fn episode(
        &mut self,
        phase: &str,
        iteration: u64,
        task_id: i64,
        episode_index: i64,
        ret: f64,
        belief_std: f64,
    ) -> Result<()> {
        self.sink.emit(&MetricRecord {
            run_id: self.run_id.clone(),
            phase: phase.into(),
            iteration,
            env_steps: self.env_steps,
            task_id,
            episode_index,
            episode_return: Some(ret),
            losses: Losses::default(),
            belief_std_mean: Some(belief_std),
            seed: self.seed,
        })
    }

    fn losses(&mut self, phase: &str, iteration: u64, losses: Losses) -> Result<()> {
        self.sink.emit(&MetricRecord {
            run_id: self.run_id.clone(),
            phase: phase.into(),
            iteration,
            env_steps: self.env_steps,
            task_id: -1,
            episode_index: -1,
            episode_return: None,
            losses,
            belief_std_mean: None,
            seed: self.seed,
        })
    }
}

struct CollectOpts<'a> {
    update_belief: bool,
    /// Belief features fed to the policy instead of `belief.features()`
    /// (the belief-gradient mode acts through its policy copy).
    bfeat_override: Option<&'a [f64]>,
}

/// Roll the policy for `steps` environment steps, updating the belief and
/// the buffer, logging one record per completed episode. Episodes restart
/// automatically; the belief persists across episode boundaries.
#[allow(clippy::too_many_arguments)]
fn collect_steps(
    agent: &AgentNets,
    embed: &EmbedNets,
    task: &TaskSpec,
    belief: &mut BeliefState,
    buffer: &mut TaskBuffer,
    steps: usize,
    opts: &CollectOpts<'_>,
    rng: &mut StdRng,
    emitter: &mut Emitter<'_>,
    phase: &str,
    iteration: u64,
    episode_counter: &mut i64,
) -> Result<()> {
    let mut state = reset(task);
    let mut episode_return = 0.0;
    for _ in 0..steps {
        let feats = belief.features();
        let bfeat: &[f64] = opts.bfeat_override.unwrap_or(&feats);
        let sample = agent.act(&state.position, bfeat, ActMode::Sample, rng)?;
        let action = [sample.action[0], sample.action[1]];
        let (reward, next, done) = step(task, &state, action)?;
        let transition = Transition {
            state: state.position,
            action,
            reward,
            next_state: next.position,
        };
        buffer.add(transition);
        if opts.update_belief {
            *belief = embed.belief_update(belief, &transition)?;
        }
        episode_return += reward;
        emitter.env_steps += 1;
        if done {
            *episode_counter += 1;
            emitter.episode(
                phase,
                iteration,
                task.task_id as i64,
                *episode_counter,
                episode_return,
                belief.std_mean(),
            )?;
            episode_return = 0.0;
            state = reset(task);
        } else {
            state = next;
        }
    }
    Ok(())
}

/// Run meta-training and return the final checkpoint. Metrics go to `sink`.
pub fn meta_train(cfg: &MetaTrainConfig, sink: &mut dyn MetricsSink) -> Result<Checkpoint> {
    cfg.validate()?;
    let tasks = sample_tasks(cfg.family, cfg.n_train_tasks, sub_rng_seed(cfg.seed, STREAM_TRAIN_TASKS))?;
    let eval_tasks = sample_tasks(cfg.family, cfg.n_eval_tasks.max(1), sub_rng_seed(cfg.seed, STREAM_EVAL_TASKS))?;

    let mut init_rng = sub_rng(cfg.seed, STREAM_INIT);
    let mut embed = EmbedNets::new(EmbedConfig::default(), &mut init_rng);
    let mut agent = AgentNets::new(AgentConfig::default(), &mut init_rng);
    let mut buffers: Vec<TaskBuffer> = tasks
        .iter()
        .map(|t| TaskBuffer::with_default_capacity(t.task_id))
        .collect();

    let mut collect_rng = sub_rng(cfg.seed, STREAM_COLLECT);
    let mut train_rng = sub_rng(cfg.seed, STREAM_TRAIN);
    let mut emitter = Emitter {
        sink,
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        env_steps: 0,
    };

    // Initial sampling phase: data for every task before any training.
    let mut episode_counter = 0i64;
    for (i, task) in tasks.iter().enumerate() {
        let mut belief = embed.prior();
        collect_steps(
            &agent,
            &embed,
            task,
            &mut belief,
            &mut buffers[i],
            cfg.initial_sampling_steps,
            &CollectOpts {
                update_belief: !cfg.no_embedding,
                bfeat_override: None,
            },
            &mut collect_rng,
            &mut emitter,
            "initial",
            0,
            &mut episode_counter,
        )?;
    }

    // Initial embedding training.
    if !cfg.no_embedding && cfg.embedding_pretrain_steps > 0 {
        let opts = PretrainOpts {
            steps: cfg.embedding_pretrain_steps,
            tasks_per_step: cfg.hyper.meta_batch,
            k_min: cfg.hyper.k_min,
            k_max: cfg.hyper.k_max,
            targets_per_context: cfg.hyper.targets_per_context,
            lr: cfg.hyper.lr_embed,
        };
        let losses = pretrain_embedding(&mut embed, &buffers, &opts, &mut train_rng)?;
        let stride = (losses.len() / 10).max(1);
        for (i, loss) in losses.iter().enumerate() {
            if i % stride == 0 || i + 1 == losses.len() {
                emitter.losses(
                    "pretrain",
                    i as u64,
                    Losses {
                        embed: Some(*loss),
                        ..Losses::default()
                    },
                )?;
            }
        }
    }

    let step_opts = TrainStepOpts {
        update_embedding: !cfg.no_embedding,
        prior_belief_only: cfg.no_embedding,
    };

    for iter in 0..cfg.total_iterations {
        let picked = crate::embed::sample_indices(
            tasks.len(),
            cfg.tasks_per_iteration,
            &mut collect_rng,
        );
        let mut episode_in_iter = 0i64;
        for &i in &picked {
            let mut belief = embed.prior();
            collect_steps(
                &agent,
                &embed,
                &tasks[i],
                &mut belief,
                &mut buffers[i],
                cfg.collection_steps,
                &CollectOpts {
                    update_belief: !cfg.no_embedding,
                    bfeat_override: None,
                },
                &mut collect_rng,
                &mut emitter,
                "collect",
                iter as u64,
                &mut episode_in_iter,
            )?;
        }

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..cfg.training_steps {
            let report: StepReport = crate::agent::train_step(
                &mut agent,
                &mut embed,
                &buffers,
                &cfg.hyper,
                &step_opts,
                &mut train_rng,
            )
            .map_err(|e| {
                Error::InvalidArgument(format!("iteration {iter}: {e}"))
            })?;
            sums.0 += report.embed.unwrap_or(0.0);
            sums.1 += report.actor;
            sums.2 += report.q;
            sums.3 += report.v;
        }
        if cfg.training_steps > 0 {
            let n = cfg.training_steps as f64;
            emitter.losses(
                "train",
                iter as u64,
                Losses {
                    embed: (!cfg.no_embedding).then_some(sums.0 / n),
                    actor: Some(sums.1 / n),
                    q: Some(sums.2 / n),
                    v: Some(sums.3 / n),
                },
            )?;
        }

        let last = iter + 1 == cfg.total_iterations;
        if (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) || last {
            evaluate_nets(
                &agent,
                &embed,
                cfg.no_embedding,
                &eval_tasks,
                cfg.eval_episodes,
                &mut emitter,
                "eval",
                iter as u64,
            )?;
        }
    }

    let mut config_echo = BTreeMap::new();
    config_echo.insert("env.family".into(), cfg.family.to_string());
    config_echo.insert("run.seed".into(), cfg.seed.to_string());
    config_echo.insert("train.no_embedding".into(), cfg.no_embedding.to_string());
    config_echo.insert(
        "train.total_iterations".into(),
        cfg.total_iterations.to_string(),
    );
    Ok(Checkpoint {
        embed,
        agent,
        buffers: cfg.save_buffers.then_some(buffers),
        no_embedding: cfg.no_embedding,
        config_echo,
    })
}

fn sub_rng_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Evaluation rollouts with mean actions. The belief starts at the prior for
/// each task and accumulates across episode boundaries. Returns the mean
/// return per episode index across tasks.
#[allow(clippy::too_many_arguments)]
fn evaluate_nets(
    agent: &AgentNets,
    embed: &EmbedNets,
    prior_only: bool,
    tasks: &[TaskSpec],
    episodes: usize,
    emitter: &mut Emitter<'_>,
    phase: &str,
    iteration: u64,
) -> Result<Vec<f64>> {
    let mut per_episode = vec![0.0f64; episodes];
    let mut dummy_rng = StdRng::seed_from_u64(0); // mean mode draws nothing
    for task in tasks {
        let mut belief = embed.prior();
        for ep in 0..episodes {
            let mut state = reset(task);
            let mut ret = 0.0;
            loop {
                let feats = belief.features();
                let sample = agent.act(&state.position, &feats, ActMode::Mean, &mut dummy_rng)?;
                let action = [sample.action[0], sample.action[1]];
                let (reward, next, done) = step(task, &state, action)?;
                if !prior_only {
                    belief = embed.belief_update(
                        &belief,
                        &Transition {
                            state: state.position,
                            action,
                            reward,
                            next_state: next.position,
                        },
                    )?;
                }
                ret += reward;
                emitter.env_steps += 1;
                state = next;
                if done {
                    break;
                }
            }
            per_episode[ep] += ret;
            emitter.episode(
                phase,
                iteration,
                task.task_id as i64,
                (ep + 1) as i64,
                ret,
                belief.std_mean(),
            )?;
        }
    }
    for v in per_episode.iter_mut() {
        *v /= tasks.len() as f64;
    }
    Ok(per_episode)
}

/// Evaluate a checkpoint on a task list: per-episode mean returns across
/// tasks, with one metric record per (task, episode).
pub fn evaluate(
    ckpt: &Checkpoint,
    tasks: &[TaskSpec],
    episodes: usize,
    sink: &mut dyn MetricsSink,
    run_id: &str,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluate: episodes must be >= 1".into()));
    }
    let mut emitter = Emitter {
        sink,
        run_id: run_id.to_string(),
        seed,
        env_steps: 0,
    };
    evaluate_nets(
        &ckpt.agent,
        &ckpt.embed,
        ckpt.no_embedding,
        tasks,
        episodes,
        &mut emitter,
        "eval",
        0,
    )
}

/// Everything a meta-test run leaves behind (metrics go to the sink as the
/// run progresses).
pub struct MetaTestOutcome {
    pub agent: AgentNets,
    pub embed: EmbedNets,
    pub belief: BeliefState,
    /// Per-episode returns of the collection episodes, in order.
    pub episode_returns: Vec<f64>,
    /// Free belief copies (pi, q, v) after optimization, in bel_grad mode.
    pub belief_copies: Option<(ParameterSet, ParameterSet, ParameterSet)>,
}

/// Run meta-testing on one task. The embedding parameters are never updated;
/// modes differ in how the belief enters and which parameters move.
pub fn meta_test(
    cfg: &MetaTestConfig,
    ckpt: &Checkpoint,
    task: &TaskSpec,
    sink: &mut dyn MetricsSink,
) -> Result<MetaTestOutcome> {
    cfg.validate()?;
    if cfg.mode == TestMode::NoEmb && !ckpt.no_embedding {
        return Err(Error::Config(
            "no_emb mode needs a checkpoint trained with no_embedding = true".into(),
        ));
    }
    if cfg.mode != TestMode::NoEmb && ckpt.no_embedding {
        return Err(Error::Config(format!(
            "mode {} needs a checkpoint trained with the embedding",
            cfg.mode
        )));
    }

    let embed = ckpt.embed.clone();
    let phi_snapshot = embed.params.clone();
    let mut agent = match cfg.mode {
        TestMode::Scratch => {
            let mut rng = sub_rng(cfg.seed, STREAM_INIT);
            AgentNets::new(ckpt.agent.cfg, &mut rng)
        }
        _ => ckpt.agent.clone(),
    };

    let mut buffer = TaskBuffer::with_default_capacity(task.task_id);
    let mut collect_rng = sub_rng(cfg.seed, STREAM_COLLECT);
    let mut train_rng = sub_rng(cfg.seed, STREAM_TRAIN);

    let mut sink_returns = VecSink::default();
    let mut tee = TeeSink {
        a: &mut sink_returns,
        b: sink,
    };
    let mut emitter = Emitter {
        sink: &mut tee,
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        env_steps: 0,
    };

    let prior_only = cfg.mode.prior_belief();
    let mut belief = embed.prior();
    let mut episode_counter = 0i64;

    // Initial sampling phase.
    collect_steps(
        &agent,
        &embed,
        task,
        &mut belief,
        &mut buffer,
        cfg.collection_steps,
        &CollectOpts {
            update_belief: !prior_only,
            bfeat_override: None,
        },
        &mut collect_rng,
        &mut emitter,
        "test_collect",
        0,
        &mut episode_counter,
    )?;
    let belief_frozen = cfg.belief_freeze_after_initial;

    // Free belief copies for the belief-gradient mode, identical across the
    // three networks at initialization.
    let mut belief_copies = if cfg.mode == TestMode::BelGrad {
        let feats = belief.features();
        let mk = || {
            let mut set = ParameterSet::new();
            set.insert(
                BELIEF_PARAM,
                Tensor::from_parts(vec![1, feats.len()], feats.clone()),
            );
            set
        };
        Some((mk(), mk(), mk()))
    } else {
        None
    };

    for iter in 1..=cfg.total_iterations {
        let pi_copy_feats: Option<Vec<f64>> = belief_copies
            .as_ref()
            .map(|(pi, _, _)| pi.get(BELIEF_PARAM).unwrap().values().to_vec());
        collect_steps(
            &agent,
            &embed,
            task,
            &mut belief,
            &mut buffer,
            cfg.collection_steps,
            &CollectOpts {
                update_belief: !prior_only && !belief_frozen,
                bfeat_override: pi_copy_feats.as_deref(),
            },
            &mut collect_rng,
            &mut emitter,
            "test_collect",
            iter as u64,
            &mut episode_counter,
        )?;

        if cfg.mode.updates_parameters() && cfg.training_steps > 0 {
            let mut sums = (0.0f64, 0.0f64, 0.0f64);
            for _ in 0..cfg.training_steps {
                let report = adapt_step(
                    &mut agent,
                    &embed,
                    &belief,
                    &buffer,
                    &cfg.hyper,
                    cfg.mode,
                    belief_copies.as_mut(),
                    &mut train_rng,
                )?;
                sums.0 += report.actor;
                sums.1 += report.q;
                sums.2 += report.v;
            }
            let n = cfg.training_steps as f64;
            emitter.losses(
                "test_train",
                iter as u64,
                Losses {
                    embed: None,
                    actor: Some(sums.0 / n),
                    q: Some(sums.1 / n),
                    v: Some(sums.2 / n),
                },
            )?;
        }
    }

    debug_assert_eq!(embed.params, phi_snapshot);
    let episode_returns = sink_returns
        .records
        .iter()
        .filter(|r| r.phase == "test_collect" && r.episode_return.is_some())
        .map(|r| r.episode_return.unwrap())
        .collect();
    Ok(MetaTestOutcome {
        agent,
        embed,
        belief,
        episode_returns,
        belief_copies,
    })
}

/// One meta-test gradient step. The belief enters per the mode; the
/// embedding parameters are untouched by construction.
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    agent: &mut AgentNets,
    embed: &EmbedNets,
    belief: &BeliefState,
    buffer: &TaskBuffer,
    hyper: &Hyperparams,
    mode: TestMode,
    mut belief_copies: Option<&mut (ParameterSet, ParameterSet, ParameterSet)>,
    rng: &mut StdRng,
) -> Result<StepReport> {
    let cb = buffer.sample_batch(
        hyper.targets_per_context,
        hyper.k_min,
        hyper.k_max,
        rng,
    )?;
    let batch = match mode {
        TestMode::Scratch | TestMode::NoEmb => crate::agent::prepare_rl_batch(embed, &cb, true)?,
        _ => {
            // Frozen belief as b; b' updated from it by each target tuple.
            let m = cb.targets.len();
            let sdim = embed.cfg.state_dim;
            let adim = embed.cfg.action_dim;
            let mut states = Vec::with_capacity(m * sdim);
            let mut actions = Vec::with_capacity(m * adim);
            let mut rewards = Vec::with_capacity(m);
            let mut next_states = Vec::with_capacity(m * sdim);
            for t in &cb.targets {
                states.extend_from_slice(&t.state);
                actions.extend_from_slice(&t.action);
                rewards.push(t.reward);
                next_states.extend_from_slice(&t.next_state);
            }
            let bfeat_next = embed.belief_update_features_batch(belief, &cb.targets)?;
            RlBatch {
                task_id: cb.task_id,
                states: Tensor::from_parts(vec![m, sdim], states),
                actions: Tensor::from_parts(vec![m, adim], actions),
                rewards,
                next_states: Tensor::from_parts(vec![m, sdim], next_states),
                bfeat: belief.features(),
                bfeat_next,
            }
        }
    };
    let batches = [batch];
    let mut report = StepReport::default();

    {
        let belief_src = match belief_copies.as_deref() {
            Some((_, q_copy, _)) if mode == TestMode::BelGrad => BeliefSource::Param(q_copy),
            _ => BeliefSource::Batch,
        };
        let out = agent.q_critic_loss(&batches, hyper.gamma, belief_src)?;
        let grads = out.grads_for(&agent.q_params);
        adam_step(&mut agent.q_params, &grads, &AdamConfig::with_lr(hyper.lr_q))?;
        if let Some((_, q_copy, _)) = belief_copies.as_deref_mut() {
            if mode == TestMode::BelGrad {
                let g = out.raw.for_params(q_copy);
                adam_step(q_copy, &g, &AdamConfig::with_lr(hyper.lr_q))?;
            }
        }
        report.q = out.value;
    }

    {
        let belief_src = match belief_copies.as_deref() {
            Some((_, _, v_copy)) if mode == TestMode::BelGrad => BeliefSource::Param(v_copy),
            _ => BeliefSource::Batch,
        };
        let out = agent.v_critic_loss(&batches, hyper.beta, belief_src)?;
        let grads = out.grads_for(&agent.v_params);
        adam_step(&mut agent.v_params, &grads, &AdamConfig::with_lr(hyper.lr_v))?;
        if let Some((_, _, v_copy)) = belief_copies.as_deref_mut() {
            if mode == TestMode::BelGrad {
                let g = out.raw.for_params(v_copy);
                adam_step(v_copy, &g, &AdamConfig::with_lr(hyper.lr_v))?;
            }
        }
        report.v = out.value;
    }

    {
        let noise = [ActorNoise::draw(&agent.cfg, batches[0].len(), rng)];
        let belief_src = match belief_copies.as_deref() {
            Some((pi_copy, _, _)) if mode == TestMode::BelGrad => BeliefSource::Param(pi_copy),
            _ => BeliefSource::Batch,
        };
        let out = agent.actor_loss(&batches, hyper.beta, &noise, belief_src)?;
        let grads = out.grads_for(&agent.pi_params);
        adam_step(&mut agent.pi_params, &grads, &AdamConfig::with_lr(hyper.lr_actor))?;
        if let Some((pi_copy, _, _)) = belief_copies.as_deref_mut() {
            if mode == TestMode::BelGrad {
                let g = out.raw.for_params(pi_copy);
                adam_step(pi_copy, &g, &AdamConfig::with_lr(hyper.lr_actor))?;
            }
        }
        report.actor = out.value;
    }

    agent.polyak_update(hyper.polyak);
    Ok(report)
}
