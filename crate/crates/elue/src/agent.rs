//! Belief-conditional soft actor-critic with an information bottleneck on
//! the policy's latent.
//!
//! The policy factors as pi1(w | s, b) * pi2(a | w, s): pi1 reads the belief
//! and emits a latent w, pi2 turns (w, s) into a tanh-bounded action. The
//! actor objective penalizes beta * log pi1(w | s, b), which is the
//! information-bottleneck surrogate with a uniform variational marginal, so
//! the latent carries belief information only where it pays off in Q-value.
//! Critics Q(s, b, a) and V(s, b) are trained SAC-style against constant
//! bootstrap targets; a Polyak-averaged copy of V supplies the Q target.
//!
//! The belief enters every network as the concatenated (mean, log_std)
//! features of the current [`BeliefState`], with gradients stopped: the
//! embedding parameters are owned by the embedding loss alone.

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embed::EmbedNets;
use crate::ndiff::{
    adam_step, gaussian_log_prob_sum, reparam, split_gaussian_head, split_gaussian_head_clamped,
    tanh_squash_rows, AdamConfig, Grads, MlpSpec, ParameterSet, RawGrads, Tape, Tensor, Var,
    LOG_STD_MAX, LOG_STD_MIN,
};

/// Ceiling on the latent head's log standard deviation. The latent w is not
/// tanh-bounded the way actions are, so at the global +2 ceiling its noise
/// (sigma ~ 7.4) drowns the mean signal, the action head learns to ignore w,
/// and with it the belief; capping sigma_w at 1 keeps the channel readable
/// at full entropy.
pub const W_LOG_STD_MAX: f64 = 0.0;
use crate::replay::{ContextBatch, TaskBuffer};
use crate::{Error, Result};

/// Architecture of the agent networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Belief feature width is 2 * z_dim.
    pub z_dim: usize,
    pub w_dim: usize,
    pub hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            state_dim: 2,
            action_dim: 2,
            z_dim: 5,
            w_dim: 5,
            hidden: 64,
        }
    }
}

impl AgentConfig {
    pub fn tiny() -> Self {
        AgentConfig {
            state_dim: 2,
            action_dim: 2,
            z_dim: 2,
            w_dim: 2,
            hidden: 4,
        }
    }

    pub fn belief_feature_dim(&self) -> usize {
        2 * self.z_dim
    }
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub gamma: f64,
    pub beta: f64,
    pub polyak: f64,
    pub lr_embed: f64,
    pub lr_actor: f64,
    pub lr_q: f64,
    pub lr_v: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub targets_per_context: usize,
    /// Tasks drawn per gradient step.
    pub meta_batch: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            beta: 0.2,
            polyak: 0.005,
            lr_embed: 3e-4,
            lr_actor: 3e-4,
            lr_q: 3e-4,
            lr_v: 3e-4,
            k_min: crate::replay::DEFAULT_K_MIN,
            k_max: crate::replay::DEFAULT_K_MAX,
            targets_per_context: crate::replay::DEFAULT_TARGETS_PER_CONTEXT,
            meta_batch: 4,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument("gamma must be in (0, 1)".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::InvalidArgument("polyak must be in (0, 1]".into()));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::InvalidArgument("need 0 < k_min <= k_max".into()));
        }
        Ok(())
    }
}

/// One draw from the two-stage policy.
#[derive(Clone, Debug)]
pub struct ActionSample {
    pub w: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob_w: f64,
    pub log_prob_action: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    /// Means of both stages; used for bootstrap targets and evaluation.
    Mean,
}

/// Where the belief features for a loss come from.
#[derive(Clone, Copy)]
pub enum BeliefSource<'a> {
    /// The per-batch features carried by [`RlBatch`]; entered as constants.
    Batch,
    /// A free `belief` entry in the given parameter set, optimized jointly
    /// with the network (the belief-gradient adaptation mode).
    Param(&'a ParameterSet),
}

/// The name of the free belief entry used by [`BeliefSource::Param`].
pub const BELIEF_PARAM: &str = "belief";

/// Policy, critics and the Polyak-averaged V target.
#[derive(Clone, Debug)]
pub struct AgentNets {
    pub cfg: AgentConfig,
    pub pi1: MlpSpec,
    pub pi2: MlpSpec,
    pub q: MlpSpec,
    pub v: MlpSpec,
    /// theta_pi: pi1.* and pi2.* entries, stepped together by the actor loss.
    pub pi_params: ParameterSet,
    pub q_params: ParameterSet,
    pub v_params: ParameterSet,
    /// theta-bar_V, tracked by Polyak averaging; never optimized directly.
    pub v_target: ParameterSet,
}

impl AgentNets {
    pub fn specs(cfg: &AgentConfig) -> (MlpSpec, MlpSpec, MlpSpec, MlpSpec) {
        let h = cfg.hidden;
        let bf = cfg.belief_feature_dim();
        let pi1 = MlpSpec::relu(vec![cfg.state_dim + bf, h, h, 2 * cfg.w_dim]);
        let pi2 = MlpSpec::relu(vec![cfg.w_dim + cfg.state_dim, h, h, 2 * cfg.action_dim]);
        let q = MlpSpec::relu(vec![cfg.state_dim + bf + cfg.action_dim, h, h, 1]);
        let v = MlpSpec::relu(vec![cfg.state_dim + bf, h, h, 1]);
        (pi1, pi2, q, v)
    }

    pub fn new(cfg: AgentConfig, rng: &mut StdRng) -> Self {
        let (pi1, pi2, q, v) = Self::specs(&cfg);
        let mut pi_params = ParameterSet::new();
        pi1.init_params("pi1", &mut pi_params, rng);
        pi2.init_params("pi2", &mut pi_params, rng);
        let mut q_params = ParameterSet::new();
        q.init_params("q", &mut q_params, rng);
        let mut v_params = ParameterSet::new();
        v.init_params("v", &mut v_params, rng);
        let v_target = v_params.clone();
        AgentNets {
            cfg,
            pi1,
            pi2,
            q,
            v,
            pi_params,
            q_params,
            v_params,
            v_target,
        }
    }

    pub fn from_params(
        cfg: AgentConfig,
        pi_params: ParameterSet,
        q_params: ParameterSet,
        v_params: ParameterSet,
        v_target: ParameterSet,
    ) -> Self {
        let (pi1, pi2, q, v) = Self::specs(&cfg);
        AgentNets {
            cfg,
            pi1,
            pi2,
            q,
            v,
            pi_params,
            q_params,
            v_params,
            v_target,
        }
    }

    fn split_head_eval(out: &[f64], dim: usize, log_std_max: f64) -> (Vec<f64>, Vec<f64>) {
        let mean = out[..dim].to_vec();
        let log_std = out[dim..2 * dim]
            .iter()
            .map(|x| x.clamp(LOG_STD_MIN, log_std_max))
            .collect();
        (mean, log_std)
    }

    /// Draw (or take the mean of) the two-stage policy at one state.
    pub fn act(
        &self,
        state: &[f64],
        bfeat: &[f64],
        mode: ActMode,
        rng: &mut StdRng,
    ) -> Result<ActionSample> {
        if bfeat.len() != self.cfg.belief_feature_dim() {
            return Err(Error::shape(
                "act belief features",
                self.cfg.belief_feature_dim(),
                bfeat.len(),
            ));
        }
        let mut in1 = Vec::with_capacity(state.len() + bfeat.len());
        in1.extend_from_slice(state);
        in1.extend_from_slice(bfeat);
        let h1 = self
            .pi1
            .eval(&self.pi_params, "pi1", &Tensor::from_parts(vec![1, in1.len()], in1))?;
        let (w_mean, w_ls) = Self::split_head_eval(h1.values(), self.cfg.w_dim, W_LOG_STD_MAX);
        let w: Vec<f64> = match mode {
            ActMode::Mean => w_mean.clone(),
            ActMode::Sample => w_mean
                .iter()
                .zip(&w_ls)
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let log_prob_w = crate::ndiff::log_prob_slice(&w_mean, &w_ls, &w);

        let mut in2 = Vec::with_capacity(self.cfg.w_dim + state.len());
        in2.extend_from_slice(&w);
        in2.extend_from_slice(state);
        let h2 = self
            .pi2
            .eval(&self.pi_params, "pi2", &Tensor::from_parts(vec![1, in2.len()], in2))?;
        let (a_mean, a_ls) = Self::split_head_eval(h2.values(), self.cfg.action_dim, LOG_STD_MAX);
        let pre_tanh: Vec<f64> = match mode {
            ActMode::Mean => a_mean.clone(),
            ActMode::Sample => a_mean
                .iter()
                .zip(&a_ls)
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let log_prob_u = crate::ndiff::log_prob_slice(&a_mean, &a_ls, &pre_tanh);
        let (action_t, log_prob_action) = crate::ndiff::tanh_squash(
            &Tensor::vector(pre_tanh.clone()),
            log_prob_u,
        );
        Ok(ActionSample {
            w,
            pre_tanh,
            action: action_t.values().to_vec(),
            log_prob_w,
            log_prob_action,
        })
    }

    /// theta-bar_V <- (1 - lambda) theta-bar_V + lambda theta_V.
    pub fn polyak_update(&mut self, lambda: f64) {
        let names: Vec<String> = self.v_params.names().map(String::from).collect();
        for name in names {
            let src = self.v_params.get(&name).expect("own name").clone();
            let dst = self
                .v_target
                .entry_mut(&name)
                .expect("v_target mirrors v_params");
            for (t, s) in dst.value.values_mut().iter_mut().zip(src.values()) {
                *t = (1.0 - lambda) * *t + lambda * s;
            }
        }
    }

    fn bfeat_var(
        &self,
        tape: &mut Tape,
        batch: &RlBatch,
        belief: &BeliefSource<'_>,
    ) -> Result<Var> {
        match belief {
            BeliefSource::Batch => Ok(tape.constant(Tensor::from_parts(
                vec![1, batch.bfeat.len()],
                batch.bfeat.clone(),
            ))),
            BeliefSource::Param(set) => tape.param(set, BELIEF_PARAM),
        }
    }

    /// Effective next-step belief features for bootstrap targets.
    fn bfeat_next_values(&self, batch: &RlBatch, belief: &BeliefSource<'_>) -> Tensor {
        match belief {
            BeliefSource::Batch => batch.bfeat_next.clone(),
            // With a free belief copy there is no encoder-tied posterior to
            // update; the copy stands in for both b and b'.
            BeliefSource::Param(set) => {
                let bf = set.get(BELIEF_PARAM).expect("belief entry").values();
                let m = batch.len();
                let mut out = Vec::with_capacity(m * bf.len());
                for _ in 0..m {
                    out.extend_from_slice(bf);
                }
                Tensor::from_parts(vec![m, bf.len()], out)
            }
        }
    }

    /// Actor objective: mean over targets of beta * log pi1(w|s,b) - Q(s,b,a)
    /// with (w, a) freshly reparameterized. Gradients reach the policy (and a
    /// free belief copy, when given) only; Q enters frozen.
    pub fn actor_loss(
        &self,
        batches: &[RlBatch],
        beta: f64,
        noise: &[ActorNoise],
        belief: BeliefSource<'_>,
    ) -> Result<LossOut> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("actor_loss: no batches".into()));
        }
        let mut tape = Tape::new();
        let mut per_batch = Vec::with_capacity(batches.len());
        for (batch, eps) in batches.iter().zip(noise) {
            let m = batch.len();
            let s_const = tape.constant(batch.states.clone());
            let bf = self.bfeat_var(&mut tape, batch, &belief)?;
            let bf_rows = tape.broadcast_rows(bf, m)?;
            let in1 = tape.concat_cols(s_const, bf_rows)?;
            let h1 = self.pi1.forward(&mut tape, &self.pi_params, "pi1", in1)?;
            let (w_mean, w_ls) =
                split_gaussian_head_clamped(&mut tape, h1, LOG_STD_MIN, W_LOG_STD_MAX)?;
            let w_noise = tape.constant(eps.w.clone());
            let w = reparam(&mut tape, w_mean, w_ls, w_noise)?;
            let log_pi1 = gaussian_log_prob_sum(&mut tape, w_mean, w_ls, w)?;

            let in2 = tape.concat_cols(w, s_const)?;
            let h2 = self.pi2.forward(&mut tape, &self.pi_params, "pi2", in2)?;
            let (a_mean, a_ls) = split_gaussian_head(&mut tape, h2)?;
            let a_noise = tape.constant(eps.a.clone());
            let pre_tanh = reparam(&mut tape, a_mean, a_ls, a_noise)?;
            let action = tape.tanh(pre_tanh);

            let sb = tape.concat_cols(s_const, bf_rows)?;
            let q_in = tape.concat_cols(sb, action)?;
            let q = self.q.forward_frozen(&mut tape, &self.q_params, "q", q_in)?;
            let q_sum = tape.sum_all(q);

            let scaled = tape.scale(log_pi1, beta);
            let diff = tape.sub(scaled, q_sum)?;
            per_batch.push(tape.scale(diff, 1.0 / m as f64));
        }
        let total = tape.add_n(per_batch)?;
        let loss = tape.scale(total, 1.0 / batches.len() as f64);
        let value = tape.value(loss).item()?;
        let raw = tape.backward(loss)?;
        Ok(LossOut { value, raw })
    }

    /// MSE between Q(s, b, a) and the constant target r + gamma * V_bar(s', b').
    pub fn q_critic_loss(
        &self,
        batches: &[RlBatch],
        gamma: f64,
        belief: BeliefSource<'_>,
    ) -> Result<LossOut> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("q_critic_loss: no batches".into()));
        }
        let mut tape = Tape::new();
        let mut per_batch = Vec::with_capacity(batches.len());
        for batch in batches {
            let m = batch.len();
            // Constant bootstrap target through the Polyak-averaged V.
            let bfeat_next = self.bfeat_next_values(batch, &belief);
            let mut vin = Vec::with_capacity(m * (self.cfg.state_dim + bfeat_next.dims2().1));
            let sdim = self.cfg.state_dim;
            let bdim = bfeat_next.dims2().1;
            for i in 0..m {
                vin.extend_from_slice(&batch.next_states.values()[i * sdim..(i + 1) * sdim]);
                vin.extend_from_slice(&bfeat_next.values()[i * bdim..(i + 1) * bdim]);
            }
            let v_next = self.v.eval(
                &self.v_target,
                "v",
                &Tensor::from_parts(vec![m, sdim + bdim], vin),
            )?;
            let target: Vec<f64> = batch
                .rewards
                .iter()
                .zip(v_next.values())
                .map(|(r, v)| r + gamma * v)
                .collect();

            let s_const = tape.constant(batch.states.clone());
            let bf = self.bfeat_var(&mut tape, batch, &belief)?;
            let bf_rows = tape.broadcast_rows(bf, m)?;
            let sb = tape.concat_cols(s_const, bf_rows)?;
            let a_const = tape.constant(batch.actions.clone());
            let q_in = tape.concat_cols(sb, a_const)?;
            let q = self.q.forward(&mut tape, &self.q_params, "q", q_in)?;
            let t_const = tape.constant(Tensor::from_parts(vec![m, 1], target));
            let diff = tape.sub(q, t_const)?;
            let sq = tape.square(diff);
            let sum = tape.sum_all(sq);
            per_batch.push(tape.scale(sum, 1.0 / m as f64));
        }
        let total = tape.add_n(per_batch)?;
        let loss = tape.scale(total, 1.0 / batches.len() as f64);
        let value = tape.value(loss).item()?;
        let raw = tape.backward(loss)?;
        Ok(LossOut { value, raw })
    }

    /// MSE between V(s, b) and the constant target
    /// Q(s, b, a~) - beta * log pi1(w~ | s, b) at mean actions.
    pub fn v_critic_loss(
        &self,
        batches: &[RlBatch],
        beta: f64,
        belief: BeliefSource<'_>,
    ) -> Result<LossOut> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("v_critic_loss: no batches".into()));
        }
        let mut tape = Tape::new();
        let mut per_batch = Vec::with_capacity(batches.len());
        for batch in batches {
            let m = batch.len();
            let target = self.v_target_values(batch, beta, &belief)?;

            let s_const = tape.constant(batch.states.clone());
            let bf = self.bfeat_var(&mut tape, batch, &belief)?;
            let bf_rows = tape.broadcast_rows(bf, m)?;
            let vin = tape.concat_cols(s_const, bf_rows)?;
            let v = self.v.forward(&mut tape, &self.v_params, "v", vin)?;
            let t_const = tape.constant(Tensor::from_parts(vec![m, 1], target));
            let diff = tape.sub(v, t_const)?;
            let sq = tape.square(diff);
            let sum = tape.sum_all(sq);
            per_batch.push(tape.scale(sum, 1.0 / m as f64));
        }
        let total = tape.add_n(per_batch)?;
        let loss = tape.scale(total, 1.0 / batches.len() as f64);
        let value = tape.value(loss).item()?;
        let raw = tape.backward(loss)?;
        Ok(LossOut { value, raw })
    }

    /// Constant V target per tuple, using mean latents and actions.
    fn v_target_values(
        &self,
        batch: &RlBatch,
        beta: f64,
        belief: &BeliefSource<'_>,
    ) -> Result<Vec<f64>> {
        let m = batch.len();
        let sdim = self.cfg.state_dim;
        let bf: Vec<f64> = match belief {
            BeliefSource::Batch => batch.bfeat.clone(),
            BeliefSource::Param(set) => set.get(BELIEF_PARAM).expect("belief entry").values().to_vec(),
        };
        let bdim = bf.len();
        let mut in1 = Vec::with_capacity(m * (sdim + bdim));
        for i in 0..m {
            in1.extend_from_slice(&batch.states.values()[i * sdim..(i + 1) * sdim]);
            in1.extend_from_slice(&bf);
        }
        let h1 = self.pi1.eval(
            &self.pi_params,
            "pi1",
            &Tensor::from_parts(vec![m, sdim + bdim], in1),
        )?;
        let wdim = self.cfg.w_dim;
        let mut w_mean = vec![0.0; m * wdim];
        let mut log_pi1 = vec![0.0; m];
        for i in 0..m {
            let row = &h1.values()[i * 2 * wdim..(i + 1) * 2 * wdim];
            for d in 0..wdim {
                w_mean[i * wdim + d] = row[d];
                let ls = row[wdim + d].clamp(LOG_STD_MIN, W_LOG_STD_MAX);
                // log pi1 at the mean: -(0.5 ln 2 pi) - log_std per dim.
                log_pi1[i] += -0.918_938_533_204_672_74 - ls;
            }
        }
        let mut in2 = Vec::with_capacity(m * (wdim + sdim));
        for i in 0..m {
            in2.extend_from_slice(&w_mean[i * wdim..(i + 1) * wdim]);
            in2.extend_from_slice(&batch.states.values()[i * sdim..(i + 1) * sdim]);
        }
        let h2 = self.pi2.eval(
            &self.pi_params,
            "pi2",
            &Tensor::from_parts(vec![m, wdim + sdim], in2),
        )?;
        let adim = self.cfg.action_dim;
        let mut a_mean = vec![0.0; m * adim];
        for i in 0..m {
            let row = &h2.values()[i * 2 * adim..(i + 1) * 2 * adim];
            a_mean[i * adim..(i + 1) * adim].copy_from_slice(&row[..adim]);
        }
        let (a_tanh, _) = tanh_squash_rows(&Tensor::from_parts(vec![m, adim], a_mean));
        let mut qin = Vec::with_capacity(m * (sdim + bdim + adim));
        for i in 0..m {
            qin.extend_from_slice(&batch.states.values()[i * sdim..(i + 1) * sdim]);
            qin.extend_from_slice(&bf);
            qin.extend_from_slice(&a_tanh.values()[i * adim..(i + 1) * adim]);
        }
        let q = self.q.eval(
            &self.q_params,
            "q",
            &Tensor::from_parts(vec![m, sdim + bdim + adim], qin),
        )?;
        Ok(q
            .values()
            .iter()
            .zip(&log_pi1)
            .map(|(q, lp)| q - beta * lp)
            .collect())
    }
}

/// A loss value and the raw gradients of every named leaf that produced it.
pub struct LossOut {
    pub value: f64,
    pub raw: RawGrads,
}

impl LossOut {
    pub fn grads_for(&self, params: &ParameterSet) -> Grads {
        self.raw.for_params(params)
    }
}

/// Reparameterization noise for one batch of the actor loss.
#[derive(Clone, Debug)]
pub struct ActorNoise {
    pub w: Tensor,
    pub a: Tensor,
}

impl ActorNoise {
    pub fn draw(cfg: &AgentConfig, m: usize, rng: &mut StdRng) -> Self {
        let w = (0..m * cfg.w_dim).map(|_| rng.sample(StandardNormal)).collect();
        let a = (0..m * cfg.action_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        ActorNoise {
            w: Tensor::from_parts(vec![m, cfg.w_dim], w),
            a: Tensor::from_parts(vec![m, cfg.action_dim], a),
        }
    }

    pub fn zeros(cfg: &AgentConfig, m: usize) -> Self {
        ActorNoise {
            w: Tensor::zeros(vec![m, cfg.w_dim]),
            a: Tensor::zeros(vec![m, cfg.action_dim]),
        }
    }
}

/// A context batch made loss-ready: tensors for the targets plus the belief
/// features of b (from the context) and of b' (b updated by each target
/// tuple).
#[derive(Clone, Debug)]
pub struct RlBatch {
    pub task_id: u64,
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub bfeat: Vec<f64>,
    pub bfeat_next: Tensor,
}

impl RlBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Encode the batch's context into a belief and pre-compute everything the
/// losses need. With `prior_only` the belief (and b') stay at the prior,
/// which is how the no-embedding ablation and from-scratch baselines run.
pub fn prepare_rl_batch(
    embed: &EmbedNets,
    batch: &ContextBatch,
    prior_only: bool,
) -> Result<RlBatch> {
    let m = batch.targets.len();
    if m == 0 {
        return Err(Error::InvalidArgument("prepare_rl_batch: no targets".into()));
    }
    let sdim = embed.cfg.state_dim;
    let adim = embed.cfg.action_dim;
    let mut states = Vec::with_capacity(m * sdim);
    let mut actions = Vec::with_capacity(m * adim);
    let mut rewards = Vec::with_capacity(m);
    let mut next_states = Vec::with_capacity(m * sdim);
    for t in &batch.targets {
        states.extend_from_slice(&t.state);
        actions.extend_from_slice(&t.action);
        rewards.push(t.reward);
        next_states.extend_from_slice(&t.next_state);
    }
    let (bfeat, bfeat_next) = if prior_only {
        let prior = embed.prior().features();
        let mut rows = Vec::with_capacity(m * prior.len());
        for _ in 0..m {
            rows.extend_from_slice(&prior);
        }
        let dim = prior.len();
        (prior, Tensor::from_parts(vec![m, dim], rows))
    } else {
        let b = embed.encode(&batch.context)?;
        let next = embed.belief_update_features_batch(&b, &batch.targets)?;
        (b.features(), next)
    };
    Ok(RlBatch {
        task_id: batch.task_id,
        states: Tensor::from_parts(vec![m, sdim], states),
        actions: Tensor::from_parts(vec![m, adim], actions),
        rewards,
        next_states: Tensor::from_parts(vec![m, sdim], next_states),
        bfeat,
        bfeat_next,
    })
}

/// Per-step loss report.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepReport {
    pub embed: Option<f64>,
    pub actor: f64,
    pub q: f64,
    pub v: f64,
}

/// Knobs that distinguish meta-training from its ablations.
#[derive(Clone, Copy, Debug)]
pub struct TrainStepOpts {
    pub update_embedding: bool,
    pub prior_belief_only: bool,
}

impl Default for TrainStepOpts {
    fn default() -> Self {
        TrainStepOpts {
            update_embedding: true,
            prior_belief_only: false,
        }
    }
}

/// One meta-training gradient step: Adam on the embedding loss, then on the
/// Q, V and actor losses, then the Polyak update of the V target.
pub fn train_step(
    agent: &mut AgentNets,
    embed: &mut EmbedNets,
    buffers: &[TaskBuffer],
    hyper: &Hyperparams,
    opts: &TrainStepOpts,
    rng: &mut StdRng,
) -> Result<StepReport> {
    hyper.validate()?;
    let mut report = StepReport::default();

    if opts.update_embedding {
        let idxs = crate::embed::sample_indices(buffers.len(), hyper.meta_batch, rng);
        let mut batches = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            batches.push(buffers[i].sample_batch(
                hyper.targets_per_context,
                hyper.k_min,
                hyper.k_max,
                rng,
            )?);
        }
        let noise = embed.draw_z_noise(batches.len(), rng);
        let (value, grads) = embed.embedding_loss(&batches, &noise)?;
        adam_step(&mut embed.params, &grads, &AdamConfig::with_lr(hyper.lr_embed))?;
        report.embed = Some(value);
    }

    let idxs = crate::embed::sample_indices(buffers.len(), hyper.meta_batch, rng);
    let mut batches = Vec::with_capacity(idxs.len());
    for &i in &idxs {
        let cb = buffers[i].sample_batch(
            hyper.targets_per_context,
            hyper.k_min,
            hyper.k_max,
            rng,
        )?;
        batches.push(prepare_rl_batch(embed, &cb, opts.prior_belief_only)?);
    }

    let q_out = agent.q_critic_loss(&batches, hyper.gamma, BeliefSource::Batch)?;
    let q_grads = q_out.grads_for(&agent.q_params);
    adam_step(&mut agent.q_params, &q_grads, &AdamConfig::with_lr(hyper.lr_q))?;
    report.q = q_out.value;

    let v_out = agent.v_critic_loss(&batches, hyper.beta, BeliefSource::Batch)?;
    let v_grads = v_out.grads_for(&agent.v_params);
    adam_step(&mut agent.v_params, &v_grads, &AdamConfig::with_lr(hyper.lr_v))?;
    report.v = v_out.value;

    let noise: Vec<ActorNoise> = batches
        .iter()
        .map(|b| ActorNoise::draw(&agent.cfg, b.len(), rng))
        .collect();
    let a_out = agent.actor_loss(&batches, hyper.beta, &noise, BeliefSource::Batch)?;
    let a_grads = a_out.grads_for(&agent.pi_params);
    adam_step(&mut agent.pi_params, &a_grads, &AdamConfig::with_lr(hyper.lr_actor))?;
    report.actor = a_out.value;

    agent.polyak_update(hyper.polyak);

    if !(report.q.is_finite() && report.v.is_finite() && report.actor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite losses: q={} v={} actor={}",
            report.q, report.v, report.actor
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedConfig;
    use crate::envsim::Transition;
    use crate::ndiff::check::{fd_grad, max_rel_error};
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn zeroed(mut nets: AgentNets) -> AgentNets {
        for set in [
            &mut nets.pi_params,
            &mut nets.q_params,
            &mut nets.v_params,
            &mut nets.v_target,
        ] {
            for (_, e) in set.iter_mut() {
                for v in e.value.values_mut() {
                    *v = 0.0;
                }
            }
        }
        nets
    }

    fn toy_batch(m: usize, seed: u64, bdim: usize) -> RlBatch {
        let mut r = rng(seed);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut next_states = Vec::new();
        for _ in 0..m {
            for _ in 0..2 {
                states.push(r.random_range(-1.0..1.0));
                actions.push(r.random_range(-1.0..1.0));
                next_states.push(r.random_range(-1.0..1.0));
            }
            rewards.push(r.random_range(-1.0..0.0));
        }
        let bfeat: Vec<f64> = (0..bdim).map(|_| r.random_range(-0.5..0.5)).collect();
        let mut bnext = Vec::new();
        for _ in 0..m {
            for _ in 0..bdim {
                bnext.push(r.random_range(-0.5..0.5));
            }
        }
        RlBatch {
            task_id: 0,
            states: Tensor::from_parts(vec![m, 2], states),
            actions: Tensor::from_parts(vec![m, 2], actions),
            rewards,
            next_states: Tensor::from_parts(vec![m, 2], next_states),
            bfeat,
            bfeat_next: Tensor::from_parts(vec![m, bdim], bnext),
        }
    }

    #[test]
    fn mean_mode_is_deterministic_and_bounded() {
        let nets = AgentNets::new(AgentConfig::default(), &mut rng(0));
        let bfeat = vec![0.0; nets.cfg.belief_feature_dim()];
        let a1 = nets.act(&[0.1, -0.3], &bfeat, ActMode::Mean, &mut rng(1)).unwrap();
        let a2 = nets.act(&[0.1, -0.3], &bfeat, ActMode::Mean, &mut rng(99)).unwrap();
        assert_eq!(a1.action, a2.action);
        for _ in 0..20 {
            let s = nets
                .act(&[0.9, 0.9], &bfeat, ActMode::Sample, &mut rng(3))
                .unwrap();
            assert!(s.action.iter().all(|a| a.abs() < 1.0));
        }
    }

    #[test]
    fn forced_standard_normal_head_log_prob() {
        // Zero pi1 weights give w ~ N(0, I); at the mean, log pi1 is
        // -w_dim * 0.5 ln(2 pi).
        let nets = zeroed(AgentNets::new(AgentConfig::default(), &mut rng(4)));
        let bfeat = vec![0.0; nets.cfg.belief_feature_dim()];
        let s = nets.act(&[0.2, 0.2], &bfeat, ActMode::Mean, &mut rng(5)).unwrap();
        let expected = -0.918_938_533_204_672_74 * nets.cfg.w_dim as f64;
        assert!((s.log_prob_w - expected).abs() < 1e-9);
        assert!(s.w.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn q_loss_substitution_values() {
        // V_bar(s', b') = 2, r = 1, gamma = 0.99 -> target 2.98.
        let mut nets = zeroed(AgentNets::new(AgentConfig::default(), &mut rng(6)));
        nets.v_target
            .set_value("v.b2", Tensor::vector(vec![2.0]))
            .unwrap();
        let batch = toy_batch(3, 7, nets.cfg.belief_feature_dim());
        let mut batch = batch;
        batch.rewards = vec![1.0; 3];

        nets.q_params
            .set_value("q.b2", Tensor::vector(vec![2.98]))
            .unwrap();
        let out = nets
            .q_critic_loss(&[batch.clone()], 0.99, BeliefSource::Batch)
            .unwrap();
        assert!(out.value.abs() < 1e-18, "loss {}", out.value);

        nets.q_params
            .set_value("q.b2", Tensor::vector(vec![0.0]))
            .unwrap();
        let out = nets.q_critic_loss(&[batch], 0.99, BeliefSource::Batch).unwrap();
        assert!((out.value - 8.8804).abs() < 1e-9, "loss {}", out.value);
    }

    #[test]
    fn v_loss_substitution_values() {
        // Q = 2.98 const, beta = 0.2, log pi1 at mean = -0.5 ln 2 pi (w_dim 1)
        // -> target 3.16378771; V = 3.1638 gives a ~1.5e-10 loss.
        let cfg = AgentConfig {
            w_dim: 1,
            ..AgentConfig::default()
        };
        let mut nets = zeroed(AgentNets::new(cfg, &mut rng(8)));
        nets.q_params
            .set_value("q.b2", Tensor::vector(vec![2.98]))
            .unwrap();
        nets.v_params
            .set_value("v.b2", Tensor::vector(vec![3.1638]))
            .unwrap();
        let batch = toy_batch(2, 9, nets.cfg.belief_feature_dim());
        let out = nets.v_critic_loss(&[batch.clone()], 0.2, BeliefSource::Batch).unwrap();
        assert!(out.value < 1e-9, "loss {}", out.value);

        // beta = 0 reduces the target to Q at the mean action.
        nets.v_params
            .set_value("v.b2", Tensor::vector(vec![2.98]))
            .unwrap();
        let out = nets.v_critic_loss(&[batch], 0.0, BeliefSource::Batch).unwrap();
        assert!(out.value.abs() < 1e-18, "loss {}", out.value);
    }

    #[test]
    fn actor_loss_with_constant_q_and_zero_beta_has_no_signal() {
        let mut nets = zeroed(AgentNets::new(AgentConfig::default(), &mut rng(10)));
        nets.q_params
            .set_value("q.b2", Tensor::vector(vec![1.25]))
            .unwrap();
        let batch = toy_batch(4, 11, nets.cfg.belief_feature_dim());
        let noise = vec![ActorNoise::draw(&nets.cfg, 4, &mut rng(12))];
        let out = nets
            .actor_loss(&[batch], 0.0, &noise, BeliefSource::Batch)
            .unwrap();
        assert!((out.value - (-1.25)).abs() < 1e-12);
        let grads = out.grads_for(&nets.pi_params);
        let max = grads
            .values()
            .flat_map(|g| g.values().iter())
            .fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max < 1e-8, "max actor gradient {max}");
    }

    #[test]
    fn actor_loss_is_linear_in_beta() {
        let nets = AgentNets::new(AgentConfig::default(), &mut rng(13));
        let batch = toy_batch(6, 14, nets.cfg.belief_feature_dim());
        let noise = vec![ActorNoise::draw(&nets.cfg, 6, &mut rng(15))];
        let at = |beta: f64| {
            nets.actor_loss(&[batch.clone()], beta, &noise, BeliefSource::Batch)
                .unwrap()
                .value
        };
        let (l0, l1, l2) = (at(0.0), at(0.5), at(1.0));
        assert!(((l1 - l0) - (l2 - l1)).abs() < 1e-12, "{l0} {l1} {l2}");
    }

    #[test]
    fn all_losses_pass_fd_certification_on_tiny_nets() {
        let cfg = AgentConfig::tiny();
        let nets = AgentNets::new(cfg, &mut rng(16));
        let batch = toy_batch(3, 17, cfg.belief_feature_dim());
        let batches = vec![batch];
        let noise = vec![ActorNoise::draw(&cfg, 3, &mut rng(18))];

        let out = nets.actor_loss(&batches, 0.2, &noise, BeliefSource::Batch).unwrap();
        let numeric = fd_grad(&nets.pi_params, 1e-5, |p| {
            let probe = AgentNets::from_params(
                cfg,
                p.clone(),
                nets.q_params.clone(),
                nets.v_params.clone(),
                nets.v_target.clone(),
            );
            probe
                .actor_loss(&batches, 0.2, &noise, BeliefSource::Batch)
                .unwrap()
                .value
        });
        let err = max_rel_error(&out.grads_for(&nets.pi_params), &numeric);
        assert!(err < 1e-4, "actor: {err}");

        let out = nets.q_critic_loss(&batches, 0.99, BeliefSource::Batch).unwrap();
        let numeric = fd_grad(&nets.q_params, 1e-5, |p| {
            let probe = AgentNets::from_params(
                cfg,
                nets.pi_params.clone(),
                p.clone(),
                nets.v_params.clone(),
                nets.v_target.clone(),
            );
            probe
                .q_critic_loss(&batches, 0.99, BeliefSource::Batch)
                .unwrap()
                .value
        });
        let err = max_rel_error(&out.grads_for(&nets.q_params), &numeric);
        assert!(err < 1e-4, "q: {err}");

        let out = nets.v_critic_loss(&batches, 0.2, BeliefSource::Batch).unwrap();
        let numeric = fd_grad(&nets.v_params, 1e-5, |p| {
            let probe = AgentNets::from_params(
                cfg,
                nets.pi_params.clone(),
                nets.q_params.clone(),
                p.clone(),
                nets.v_target.clone(),
            );
            probe
                .v_critic_loss(&batches, 0.2, BeliefSource::Batch)
                .unwrap()
                .value
        });
        let err = max_rel_error(&out.grads_for(&nets.v_params), &numeric);
        assert!(err < 1e-4, "v: {err}");
    }

    #[test]
    fn critic_targets_are_constant_in_the_target_network() {
        // The tape reports exactly zero gradient for theta-bar_V.
        let cfg = AgentConfig::tiny();
        let nets = AgentNets::new(cfg, &mut rng(19));
        let batches = vec![toy_batch(3, 20, cfg.belief_feature_dim())];
        let out = nets.q_critic_loss(&batches, 0.99, BeliefSource::Batch).unwrap();
        let g = out.grads_for(&nets.v_target);
        assert!(g.values().all(|t| t.values().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn polyak_cases() {
        let mut nets = AgentNets::new(AgentConfig::tiny(), &mut rng(21));
        let v_before = nets.v_params.clone();
        nets.polyak_update(1.0);
        assert_eq!(nets.v_target, v_before);

        // lambda = 0 leaves the target untouched.
        let mut nets = AgentNets::new(AgentConfig::tiny(), &mut rng(22));
        nets.v_params.randomize(0.5, &mut rng(23));
        let t_before = nets.v_target.clone();
        nets.polyak_update(0.0);
        assert_eq!(nets.v_target, t_before);

        // Scalar case: 0 tracked toward 1 at rate 0.005.
        let mut nets = AgentNets::new(AgentConfig::tiny(), &mut rng(24));
        for (_, e) in nets.v_params.iter_mut() {
            for v in e.value.values_mut() {
                *v = 1.0;
            }
        }
        for (_, e) in nets.v_target.iter_mut() {
            for v in e.value.values_mut() {
                *v = 0.0;
            }
        }
        nets.polyak_update(0.005);
        for (_, e) in nets.v_target.iter() {
            for v in e.value.values() {
                assert!((v - 0.005).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn polyak_tracks_a_frozen_v_exponentially() {
        let mut nets = AgentNets::new(AgentConfig::tiny(), &mut rng(25));
        nets.v_params.randomize(1.0, &mut rng(26));
        let dist = |nets: &AgentNets| {
            let mut acc = 0.0;
            for (name, e) in nets.v_params.iter() {
                let t = nets.v_target.get(name).unwrap();
                for (a, b) in e.value.values().iter().zip(t.values()) {
                    acc += (a - b) * (a - b);
                }
            }
            acc.sqrt()
        };
        let d0 = dist(&nets);
        let lambda = 0.005;
        for step in 1..=200 {
            nets.polyak_update(lambda);
            let expected = d0 * (1.0 - lambda).powi(step);
            assert!((dist(&nets) - expected).abs() < 1e-9 * (1.0 + expected));
        }
        assert!(dist(&nets) < d0);
    }

    #[test]
    fn train_step_with_zero_lr_changes_nothing_and_runs() {
        let mut r = rng(27);
        let mut embed = EmbedNets::new(EmbedConfig::tiny(), &mut r);
        let cfg = AgentConfig::tiny();
        let mut agent = AgentNets::new(cfg, &mut r);
        let mut buf = TaskBuffer::new(0, 1000);
        for _ in 0..40 {
            buf.add(Transition {
                state: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                action: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                reward: r.random_range(-1.0..0.0),
                next_state: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            });
        }
        let buffers = vec![buf];
        let hyper = Hyperparams {
            lr_embed: 0.0,
            lr_actor: 0.0,
            lr_q: 0.0,
            lr_v: 0.0,
            polyak: 1e-12,
            meta_batch: 1,
            k_min: 2,
            k_max: 8,
            targets_per_context: 4,
            ..Hyperparams::default()
        };
        let e_before = embed.params.clone();
        let pi_before = agent.pi_params.clone();
        let report = train_step(
            &mut agent,
            &mut embed,
            &buffers,
            &hyper,
            &TrainStepOpts::default(),
            &mut r,
        )
        .unwrap();
        assert!(report.embed.is_some());
        for (name, e) in embed.params.iter() {
            assert_eq!(e.value, e_before.get(name).unwrap().clone(), "{name}");
        }
        for (name, e) in agent.pi_params.iter() {
            assert_eq!(e.value, pi_before.get(name).unwrap().clone(), "{name}");
        }
    }
}
