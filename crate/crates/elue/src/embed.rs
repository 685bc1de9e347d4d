//! Variational task embedding.
//!
//! A permutation-invariant deep-set encoder maps a set of transitions to a
//! diagonal-Gaussian belief over a latent task variable z: the per-tuple
//! feature net `f` is summed over the set and a head `g` maps the aggregate
//! to (mean, log_std). Keeping the running aggregate makes belief updates
//! O(1) in the number of observed tuples. Two decoders predict reward and
//! next state from (transition, z); the embedding loss is the negative ELBO
//! of the context set under the decoders plus the KL to the standard-normal
//! prior. The loss never looks at the policy, which is what makes the
//! embedding trainable from arbitrarily old replay data.

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::envsim::Transition;
use crate::ndiff::{
    adam_step, gaussian_log_prob_sum, kl_to_std_normal_sum, reparam, split_gaussian_head,
    split_gaussian_head_clamped, AdamConfig, DiagGaussian, Grads, MlpSpec, ParameterSet, Tape,
    Tensor, LOG_STD_MAX, LOG_STD_MIN,
};

/// Variance floor for the reward and next-state decoders. The environment is
/// deterministic, so without a floor their log_std runs to the global clamp
/// where the Gaussian log-density curvature (~1/sigma^2) makes training
/// noise-bound and the latent stops carrying task information.
pub const DECODER_LOG_STD_MIN: f64 = -3.0;
use crate::replay::{ContextBatch, TaskBuffer};
use crate::{Error, Result};

/// Dimensions of the embedding networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub z_dim: usize,
    pub agg_dim: usize,
    pub hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            state_dim: 2,
            action_dim: 2,
            z_dim: 5,
            agg_dim: 64,
            hidden: 64,
        }
    }
}

impl EmbedConfig {
    /// Tiny dimensions for gradient-certification tests.
    pub fn tiny() -> Self {
        EmbedConfig {
            state_dim: 2,
            action_dim: 2,
            z_dim: 2,
            agg_dim: 4,
            hidden: 4,
        }
    }

    pub fn tuple_dim(&self) -> usize {
        2 * self.state_dim + self.action_dim + 1
    }

    pub fn belief_feature_dim(&self) -> usize {
        2 * self.z_dim
    }
}

/// Gaussian belief over z together with the running deep-set aggregate that
/// makes incremental updates cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState {
    pub count: usize,
    pub aggregate: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl BeliefState {
    pub fn prior(agg_dim: usize, z_dim: usize) -> Self {
        BeliefState {
            count: 0,
            aggregate: vec![0.0; agg_dim],
            mean: vec![0.0; z_dim],
            log_std: vec![0.0; z_dim],
        }
    }

    /// Concatenated (mean, log_std) vector fed to the agent's networks.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.mean.len());
        f.extend_from_slice(&self.mean);
        f.extend_from_slice(&self.log_std);
        f
    }

    pub fn as_gaussian(&self) -> DiagGaussian {
        DiagGaussian::new(
            Tensor::vector(self.mean.clone()),
            Tensor::vector(self.log_std.clone()),
        )
        .expect("matching dims")
    }

    /// Average posterior standard deviation, a scalar uncertainty summary.
    pub fn std_mean(&self) -> f64 {
        let n = self.log_std.len().max(1) as f64;
        self.log_std.iter().map(|ls| ls.exp()).sum::<f64>() / n
    }

    /// Flat serialization payload: aggregate, mean, log_std.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.aggregate.clone();
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn from_flat(count: usize, agg_dim: usize, z_dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != agg_dim + 2 * z_dim {
            return Err(Error::shape(
                "BeliefState::from_flat",
                agg_dim + 2 * z_dim,
                flat.len(),
            ));
        }
        Ok(BeliefState {
            count,
            aggregate: flat[..agg_dim].to_vec(),
            mean: flat[agg_dim..agg_dim + z_dim].to_vec(),
            log_std: flat[agg_dim + z_dim..].to_vec(),
        })
    }
}

/// Encoder (f, g) and the two decoders, with their shared parameter set.
#[derive(Clone, Debug)]
pub struct EmbedNets {
    pub cfg: EmbedConfig,
    pub f: MlpSpec,
    pub g: MlpSpec,
    pub reward_dec: MlpSpec,
    pub state_dec: MlpSpec,
    pub params: ParameterSet,
}

impl EmbedNets {
    pub fn specs(cfg: &EmbedConfig) -> (MlpSpec, MlpSpec, MlpSpec, MlpSpec) {
        let h = cfg.hidden;
        let f = MlpSpec::relu(vec![cfg.tuple_dim(), h, h, cfg.agg_dim]);
        let g = MlpSpec::relu(vec![cfg.agg_dim, h, h, 2 * cfg.z_dim]);
        let reward_dec = MlpSpec::relu(vec![
            2 * cfg.state_dim + cfg.action_dim + cfg.z_dim,
            h,
            h,
            2,
        ]);
        let state_dec = MlpSpec::relu(vec![
            cfg.state_dim + cfg.action_dim + cfg.z_dim,
            h,
            h,
            2 * cfg.state_dim,
        ]);
        (f, g, reward_dec, state_dec)
    }

    pub fn new(cfg: EmbedConfig, rng: &mut StdRng) -> Self {
        let (f, g, reward_dec, state_dec) = Self::specs(&cfg);
        let mut params = ParameterSet::new();
        f.init_params("f", &mut params, rng);
        g.init_params("g", &mut params, rng);
        reward_dec.init_params("rdec", &mut params, rng);
        state_dec.init_params("sdec", &mut params, rng);
        EmbedNets {
            cfg,
            f,
            g,
            reward_dec,
            state_dec,
            params,
        }
    }

    /// Rebuild the net around an existing parameter set (checkpoint load).
    pub fn from_params(cfg: EmbedConfig, params: ParameterSet) -> Self {
        let (f, g, reward_dec, state_dec) = Self::specs(&cfg);
        EmbedNets {
            cfg,
            f,
            g,
            reward_dec,
            state_dec,
            params,
        }
    }

    pub fn prior(&self) -> BeliefState {
        BeliefState::prior(self.cfg.agg_dim, self.cfg.z_dim)
    }

    fn context_matrix(&self, context: &[Transition]) -> Tensor {
        let mut values = Vec::with_capacity(context.len() * self.cfg.tuple_dim());
        for t in context {
            values.extend_from_slice(&t.features());
        }
        Tensor::from_parts(vec![context.len(), self.cfg.tuple_dim()], values)
    }

    /// Apply the head g to an aggregate and split into a clamped belief.
    fn head(&self, aggregate: &[f64], count: usize) -> Result<BeliefState> {
        let z = self.cfg.z_dim;
        let input = Tensor::from_parts(vec![1, aggregate.len()], aggregate.to_vec());
        let out = self.g.eval(&self.params, "g", &input)?;
        let v = out.values();
        let mean = v[..z].to_vec();
        let log_std = v[z..].iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(BeliefState {
            count,
            aggregate: aggregate.to_vec(),
            mean,
            log_std,
        })
    }

    /// Batch-encode a context set. The empty context maps to the prior.
    pub fn encode(&self, context: &[Transition]) -> Result<BeliefState> {
        if context.is_empty() {
            return Ok(self.prior());
        }
        let x = self.context_matrix(context);
        let feats = self.f.eval(&self.params, "f", &x)?;
        let (rows, cols) = feats.dims2();
        let fv = feats.values();
        let mut aggregate = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                aggregate[j] += fv[i * cols + j];
            }
        }
        self.head(&aggregate, context.len())
    }

    /// O(1) incremental update: add one tuple's feature to the aggregate and
    /// re-apply the head. Folding this over a context equals `encode`.
    pub fn belief_update(&self, b: &BeliefState, t: &Transition) -> Result<BeliefState> {
        let x = Tensor::from_parts(vec![1, self.cfg.tuple_dim()], t.features().to_vec());
        let feat = self.f.eval(&self.params, "f", &x)?;
        let mut aggregate = b.aggregate.clone();
        for (a, v) in aggregate.iter_mut().zip(feat.values()) {
            *a += v;
        }
        self.head(&aggregate, b.count + 1)
    }

    /// Belief features of `belief_update(b, t)` for every tuple in a batch,
    /// as an (n, 2 z_dim) matrix. Row i equals
    /// `belief_update(b, tuples[i]).features()` exactly.
    pub fn belief_update_features_batch(
        &self,
        b: &BeliefState,
        tuples: &[Transition],
    ) -> Result<Tensor> {
        let n = tuples.len();
        let x = self.context_matrix(tuples);
        let feats = self.f.eval(&self.params, "f", &x)?;
        let agg_dim = self.cfg.agg_dim;
        let mut aggs = Vec::with_capacity(n * agg_dim);
        for i in 0..n {
            let row = &feats.values()[i * agg_dim..(i + 1) * agg_dim];
            for j in 0..agg_dim {
                aggs.push(b.aggregate[j] + row[j]);
            }
        }
        let heads = self
            .g
            .eval(&self.params, "g", &Tensor::from_parts(vec![n, agg_dim], aggs))?;
        let z = self.cfg.z_dim;
        let mut out = Vec::with_capacity(n * 2 * z);
        for i in 0..n {
            let row = &heads.values()[i * 2 * z..(i + 1) * 2 * z];
            out.extend_from_slice(&row[..z]);
            out.extend(row[z..].iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        Ok(Tensor::from_parts(vec![n, 2 * z], out))
    }

    /// Gaussian over the reward for (s, a, s', z).
    pub fn decode_reward(
        &self,
        z: &[f64],
        s: &[f64],
        a: &[f64],
        s_next: &[f64],
    ) -> Result<DiagGaussian> {
        let mut input = Vec::new();
        input.extend_from_slice(s);
        input.extend_from_slice(a);
        input.extend_from_slice(s_next);
        input.extend_from_slice(z);
        let expect = self.reward_dec.in_dim();
        if input.len() != expect {
            return Err(Error::shape("decode_reward input", expect, input.len()));
        }
        let out = self
            .reward_dec
            .eval(&self.params, "rdec", &Tensor::from_parts(vec![1, expect], input))?;
        DiagGaussian::new(
            Tensor::vector(vec![out.values()[0]]),
            Tensor::vector(vec![out.values()[1].max(DECODER_LOG_STD_MIN)]),
        )
    }

    /// Gaussian over the next state for (s, a, z).
    pub fn decode_next_state(&self, z: &[f64], s: &[f64], a: &[f64]) -> Result<DiagGaussian> {
        let mut input = Vec::new();
        input.extend_from_slice(s);
        input.extend_from_slice(a);
        input.extend_from_slice(z);
        let expect = self.state_dec.in_dim();
        if input.len() != expect {
            return Err(Error::shape("decode_next_state input", expect, input.len()));
        }
        let out = self
            .state_dec
            .eval(&self.params, "sdec", &Tensor::from_parts(vec![1, expect], input))?;
        let d = self.cfg.state_dim;
        DiagGaussian::new(
            Tensor::vector(out.values()[..d].to_vec()),
            Tensor::vector(out.values()[d..].iter().map(|v| v.max(DECODER_LOG_STD_MIN)).collect()),
        )
    }

    /// Negative ELBO of the context sets, averaged over batches, with a
    /// single reparameterized z sample per context.
    ///
    /// `z_noise` holds one standard-normal vector per batch, in batch order.
    /// Returns the loss value and its gradient with respect to the embedding
    /// parameters only; the loss is independent of the policy by
    /// construction.
    pub fn embedding_loss(
        &self,
        batches: &[ContextBatch],
        z_noise: &[Vec<f64>],
    ) -> Result<(f64, Grads)> {
        if batches.is_empty() {
            return Err(Error::InvalidArgument("embedding_loss: no batches".into()));
        }
        if z_noise.len() != batches.len() {
            return Err(Error::shape(
                "embedding_loss noise",
                batches.len(),
                z_noise.len(),
            ));
        }
        let s = self.cfg.state_dim;
        let a_dim = self.cfg.action_dim;
        let mut tape = Tape::new();
        let mut batch_losses = Vec::with_capacity(batches.len());
        for (batch, noise) in batches.iter().zip(z_noise) {
            if batch.context.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "embedding_loss: empty context for task {}",
                    batch.task_id
                )));
            }
            let k = batch.context.len();
            // Encoder.
            let x = tape.constant(self.context_matrix(&batch.context));
            let feats = self.f.forward(&mut tape, &self.params, "f", x)?;
            let agg = tape.sum_rows(feats);
            let head = self.g.forward(&mut tape, &self.params, "g", agg)?;
            let (post_mean, post_log_std) = split_gaussian_head(&mut tape, head)?;
            let noise_var = tape.constant(Tensor::from_parts(vec![1, self.cfg.z_dim], noise.clone()));
            let z = reparam(&mut tape, post_mean, post_log_std, noise_var)?;
            let z_rows = tape.broadcast_rows(z, k)?;

            // Split the context columns once.
            let mut s_cols = Vec::with_capacity(k * s);
            let mut a_cols = Vec::with_capacity(k * a_dim);
            let mut r_col = Vec::with_capacity(k);
            let mut sn_cols = Vec::with_capacity(k * s);
            for t in &batch.context {
                s_cols.extend_from_slice(&t.state);
                a_cols.extend_from_slice(&t.action);
                r_col.push(t.reward);
                sn_cols.extend_from_slice(&t.next_state);
            }

            // Reward decoder over the whole context.
            let mut rdec_in = Vec::with_capacity(k * (2 * s + a_dim));
            for i in 0..k {
                rdec_in.extend_from_slice(&s_cols[i * s..(i + 1) * s]);
                rdec_in.extend_from_slice(&a_cols[i * a_dim..(i + 1) * a_dim]);
                rdec_in.extend_from_slice(&sn_cols[i * s..(i + 1) * s]);
            }
            let rdec_const = tape.constant(Tensor::from_parts(vec![k, 2 * s + a_dim], rdec_in));
            let rdec_full = tape.concat_cols(rdec_const, z_rows)?;
            let rd_out = self
                .reward_dec
                .forward(&mut tape, &self.params, "rdec", rdec_full)?;
            let (r_mean, r_log_std) =
                split_gaussian_head_clamped(&mut tape, rd_out, DECODER_LOG_STD_MIN, LOG_STD_MAX)?;
            let r_target = tape.constant(Tensor::from_parts(vec![k, 1], r_col));
            let lp_r = gaussian_log_prob_sum(&mut tape, r_mean, r_log_std, r_target)?;

            // Next-state decoder over the whole context.
            let mut sdec_in = Vec::with_capacity(k * (s + a_dim));
            for i in 0..k {
                sdec_in.extend_from_slice(&s_cols[i * s..(i + 1) * s]);
                sdec_in.extend_from_slice(&a_cols[i * a_dim..(i + 1) * a_dim]);
            }
            let sdec_const = tape.constant(Tensor::from_parts(vec![k, s + a_dim], sdec_in));
            let sdec_full = tape.concat_cols(sdec_const, z_rows)?;
            let sd_out = self
                .state_dec
                .forward(&mut tape, &self.params, "sdec", sdec_full)?;
            let (s_mean, s_log_std) =
                split_gaussian_head_clamped(&mut tape, sd_out, DECODER_LOG_STD_MIN, LOG_STD_MAX)?;
            let s_target = tape.constant(Tensor::from_parts(vec![k, s], sn_cols));
            let lp_s = gaussian_log_prob_sum(&mut tape, s_mean, s_log_std, s_target)?;

            // -(recon) + KL
            let recon = tape.add(lp_r, lp_s)?;
            let neg_recon = tape.scale(recon, -1.0);
            let kl = kl_to_std_normal_sum(&mut tape, post_mean, post_log_std)?;
            let batch_loss = tape.add(neg_recon, kl)?;
            batch_losses.push(batch_loss);
        }
        let total = tape.add_n(batch_losses)?;
        let loss = tape.scale(total, 1.0 / batches.len() as f64);
        let value = tape.value(loss).item()?;
        let grads = tape.grad(loss, &self.params)?;
        Ok((value, grads))
    }

    /// Draw one z-noise vector per batch, in batch order.
    pub fn draw_z_noise(&self, n_batches: usize, rng: &mut StdRng) -> Vec<Vec<f64>> {
        (0..n_batches)
            .map(|_| {
                (0..self.cfg.z_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

/// Knobs for the initial embedding-training phase.
#[derive(Clone, Copy, Debug)]
pub struct PretrainOpts {
    pub steps: usize,
    pub tasks_per_step: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub targets_per_context: usize,
    pub lr: f64,
}

/// Adam steps on the embedding loss over random context batches. Returns the
/// per-step losses.
pub fn pretrain_embedding(
    nets: &mut EmbedNets,
    buffers: &[TaskBuffer],
    opts: &PretrainOpts,
    rng: &mut StdRng,
) -> Result<Vec<f64>> {
    if buffers.is_empty() || buffers.iter().any(|b| b.is_empty()) {
        return Err(Error::Replay(
            "pretrain_embedding: every task needs initial data".into(),
        ));
    }
    let adam = AdamConfig::with_lr(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let idxs = sample_indices(buffers.len(), opts.tasks_per_step, rng);
        let mut batches = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            batches.push(buffers[i].sample_batch(
                opts.targets_per_context,
                opts.k_min,
                opts.k_max,
                rng,
            )?);
        }
        let noise = nets.draw_z_noise(batches.len(), rng);
        let (value, grads) = nets.embedding_loss(&batches, &noise)?;
        adam_step(&mut nets.params, &grads, &adam)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Choose `count` distinct indices from `0..n` (all of them when count >= n),
/// in random order.
pub fn sample_indices(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idxs: Vec<usize> = (0..n).collect();
    let take = count.min(n);
    for i in 0..take {
        let j = rng.random_range(i..n);
        idxs.swap(i, j);
    }
    idxs.truncate(take);
    idxs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn random_transition(rng: &mut StdRng) -> Transition {
        Transition {
            state: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            action: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            reward: rng.random_range(-1.5..0.0),
            next_state: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    fn context(n: usize, seed: u64) -> Vec<Transition> {
        let mut r = rng(seed);
        (0..n).map(|_| random_transition(&mut r)).collect()
    }

    #[test]
    fn prior_is_standard_normal_and_phi_independent() {
        let nets_a = EmbedNets::new(EmbedConfig::default(), &mut rng(0));
        let nets_b = EmbedNets::new(EmbedConfig::default(), &mut rng(99));
        assert_eq!(nets_a.prior(), nets_b.prior());
        let p = nets_a.prior();
        assert!(p.mean.iter().all(|&m| m == 0.0));
        assert!(p.log_std.iter().all(|&ls| ls == 0.0));
        assert_eq!(p.count, 0);
        let kl = crate::ndiff::kl_diag_gaussians(
            &p.as_gaussian(),
            &DiagGaussian::standard(nets_a.cfg.z_dim),
        )
        .unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn encode_empty_is_prior() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(1));
        assert_eq!(nets.encode(&[]).unwrap(), nets.prior());
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(2));
        let ctx = context(16, 3);
        let fwd = nets.encode(&ctx).unwrap();
        let mut rev = ctx.clone();
        rev.reverse();
        let bwd = nets.encode(&rev).unwrap();
        for (a, b) in fwd.mean.iter().zip(&bwd.mean) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in fwd.log_std.iter().zip(&bwd.log_std) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_single_tuple_matches_straight_line_oracle() {
        // Recompute g(f(c1)) with plain nested loops, independent of MlpSpec.
        let cfg = EmbedConfig::tiny();
        let nets = EmbedNets::new(cfg, &mut rng(4));
        let t = context(1, 5)[0];
        let got = nets.encode(&[t]).unwrap();

        let eval_mlp = |widths: &[usize], prefix: &str, input: &[f64]| -> Vec<f64> {
            let mut h = input.to_vec();
            for layer in 0..widths.len() - 1 {
                let w = nets.params.get(&format!("{prefix}.w{layer}")).unwrap().values();
                let b = nets.params.get(&format!("{prefix}.b{layer}")).unwrap().values();
                let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
                let mut out = vec![0.0; fan_out];
                for j in 0..fan_out {
                    let mut acc = b[j];
                    for l in 0..fan_in {
                        acc += h[l] * w[l * fan_out + j];
                    }
                    out[j] = if layer + 2 < widths.len() { acc.max(0.0) } else { acc };
                }
                h = out;
            }
            h
        };
        let feat = eval_mlp(&nets.f.layer_widths, "f", &t.features());
        let head = eval_mlp(&nets.g.layer_widths, "g", &feat);
        for i in 0..cfg.z_dim {
            assert!((got.mean[i] - head[i]).abs() < 1e-12);
            let ls = head[cfg.z_dim + i].clamp(LOG_STD_MIN, LOG_STD_MAX);
            assert!((got.log_std[i] - ls).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_update_equals_batch_encode() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(6));
        let ctx = context(9, 7);
        let mut b = nets.prior();
        for t in &ctx {
            b = nets.belief_update(&b, t).unwrap();
        }
        let batch = nets.encode(&ctx).unwrap();
        assert_eq!(b.count, batch.count);
        for (a, e) in b.mean.iter().zip(&batch.mean) {
            assert!((a - e).abs() < 1e-9);
        }
        for (a, e) in b.log_std.iter().zip(&batch.log_std) {
            assert!((a - e).abs() < 1e-9);
        }
        // Single-step case: update(prior, c1) == encode([c1]).
        let one = nets.belief_update(&nets.prior(), &ctx[0]).unwrap();
        assert_eq!(one, nets.encode(&ctx[..1]).unwrap());
    }

    #[test]
    fn batched_update_features_match_single_updates() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(8));
        let b = nets.encode(&context(12, 9)).unwrap();
        let tuples = context(5, 10);
        let batch = nets.belief_update_features_batch(&b, &tuples).unwrap();
        for (i, t) in tuples.iter().enumerate() {
            let single = nets.belief_update(&b, t).unwrap().features();
            let row = &batch.values()[i * single.len()..(i + 1) * single.len()];
            assert_eq!(row, single.as_slice());
        }
    }

    #[test]
    fn belief_update_cost_is_independent_of_count() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(11));
        let t = context(1, 12)[0];
        let mut small = nets.prior();
        small = nets.belief_update(&small, &t).unwrap();
        let mut big = nets.prior();
        big.count = 10_000;
        for a in big.aggregate.iter_mut() {
            *a = 3.0;
        }

        let time = |b: &BeliefState| {
            let reps = 400;
            let start = std::time::Instant::now();
            let mut sink = 0.0;
            for _ in 0..reps {
                sink += nets.belief_update(b, &t).unwrap().mean[0];
            }
            std::hint::black_box(sink);
            start.elapsed().as_secs_f64() / reps as f64
        };
        // Warm up, then compare.
        time(&small);
        let t_small = time(&small);
        let t_big = time(&big);
        assert!(
            t_big < 2.0 * t_small + 1e-4,
            "update at count 10^4 took {t_big}s vs {t_small}s at count 1"
        );
    }

    #[test]
    fn decoders_produce_exact_unit_variance_values_when_rigged() {
        // Zero all weights; set decoder biases to the exact targets.
        let cfg = EmbedConfig::default();
        let mut nets = EmbedNets::new(cfg, &mut rng(13));
        for (_, entry) in nets.params.iter_mut() {
            for v in entry.value.values_mut() {
                *v = 0.0;
            }
        }
        let t = Transition {
            state: [0.1, -0.2],
            action: [0.5, 0.5],
            reward: -0.7,
            next_state: [0.15, -0.15],
        };
        nets.params
            .set_value("rdec.b2", Tensor::vector(vec![t.reward, 0.0]))
            .unwrap();
        nets.params
            .set_value(
                "sdec.b2",
                Tensor::vector(vec![t.next_state[0], t.next_state[1], 0.0, 0.0]),
            )
            .unwrap();
        let z = vec![0.0; cfg.z_dim];
        let rd = nets.decode_reward(&z, &t.state, &t.action, &t.next_state).unwrap();
        let lp = rd.log_prob(&Tensor::vector(vec![t.reward])).unwrap();
        assert!((lp - (-0.918_938_533_204_672_74)).abs() < 1e-9);
        let sd = nets.decode_next_state(&z, &t.state, &t.action).unwrap();
        let lp = sd.log_prob(&Tensor::vector(t.next_state.to_vec())).unwrap();
        assert!((lp - (-1.837_877_066_409_345_5)).abs() < 1e-9);
    }

    #[test]
    fn decoder_outputs_finite_far_from_prior() {
        let nets = EmbedNets::new(EmbedConfig::default(), &mut rng(14));
        let z = vec![3.0; nets.cfg.z_dim];
        let d = nets.decode_reward(&z, &[0.9, -0.9], &[1.0, -1.0], &[0.8, -0.8]).unwrap();
        assert!(d.mean().all_finite() && d.log_std().all_finite());
        let d = nets.decode_next_state(&z, &[0.9, -0.9], &[1.0, -1.0]).unwrap();
        assert!(d.mean().all_finite() && d.log_std().all_finite());
    }

    fn rigged_loss_batch(z_dim: usize) -> (EmbedNets, ContextBatch) {
        let cfg = EmbedConfig {
            z_dim,
            ..EmbedConfig::default()
        };
        let mut nets = EmbedNets::new(cfg, &mut rng(15));
        for (_, entry) in nets.params.iter_mut() {
            for v in entry.value.values_mut() {
                *v = 0.0;
            }
        }
        let t = Transition {
            state: [0.3, 0.4],
            action: [-0.2, 0.9],
            reward: -0.55,
            next_state: [0.25, 0.5],
        };
        nets.params
            .set_value("rdec.b2", Tensor::vector(vec![t.reward, 0.0]))
            .unwrap();
        nets.params
            .set_value(
                "sdec.b2",
                Tensor::vector(vec![t.next_state[0], t.next_state[1], 0.0, 0.0]),
            )
            .unwrap();
        let batch = ContextBatch {
            task_id: 0,
            context: vec![t],
            targets: vec![t],
        };
        (nets, batch)
    }

    #[test]
    fn embedding_loss_of_perfect_unit_variance_fit() {
        // Posterior == prior (zero head), decoders exactly predict the
        // context tuple with unit variance: loss is 3 * 0.5*ln(2*pi), the
        // KL term is zero, and the z sample is irrelevant.
        let (nets, batch) = rigged_loss_batch(5);
        let noise = vec![vec![0.7; 5]];
        let (value, _) = nets.embedding_loss(&[batch], &noise).unwrap();
        let expected = 3.0 * 0.918_938_533_204_672_74;
        assert!((value - expected).abs() < 1e-9, "{value} vs {expected}");
    }

    #[test]
    fn embedding_loss_kl_term_adds_half_per_unit_mean() {
        // Posterior forced to N(1, 1) per dim with z_dim = 2: KL adds 1.0.
        let (mut nets, batch) = rigged_loss_batch(2);
        nets.params
            .set_value("g.b2", Tensor::vector(vec![1.0, 1.0, 0.0, 0.0]))
            .unwrap();
        let noise = vec![vec![0.0; 2]];
        let (value, _) = nets.embedding_loss(&[batch], &noise).unwrap();
        let expected = 3.0 * 0.918_938_533_204_672_74 + 1.0;
        assert!((value - expected).abs() < 1e-9, "{value} vs {expected}");
    }

    #[test]
    fn embedding_loss_matches_term_by_term_oracle() {
        // Straight-line ELBO recomputation through the eval path, with the
        // same z noise.
        let cfg = EmbedConfig::tiny();
        let nets = EmbedNets::new(cfg, &mut rng(16));
        let mut r = rng(17);
        let batches: Vec<ContextBatch> = (0..3)
            .map(|i| {
                let ctx: Vec<Transition> = (0..4 + i).map(|_| random_transition(&mut r)).collect();
                ContextBatch {
                    task_id: i as u64,
                    context: ctx,
                    targets: vec![],
                }
            })
            .collect();
        let noise = nets.draw_z_noise(batches.len(), &mut r);
        let (value, _) = nets.embedding_loss(&batches, &noise).unwrap();

        let mut oracle = 0.0;
        for (batch, n) in batches.iter().zip(&noise) {
            let post = nets.encode(&batch.context).unwrap();
            let z: Vec<f64> = post
                .mean
                .iter()
                .zip(&post.log_std)
                .zip(n)
                .map(|((m, ls), eps)| m + ls.exp() * eps)
                .collect();
            let mut recon = 0.0;
            for t in &batch.context {
                recon += nets
                    .decode_reward(&z, &t.state, &t.action, &t.next_state)
                    .unwrap()
                    .log_prob(&Tensor::vector(vec![t.reward]))
                    .unwrap();
                recon += nets
                    .decode_next_state(&z, &t.state, &t.action)
                    .unwrap()
                    .log_prob(&Tensor::vector(t.next_state.to_vec()))
                    .unwrap();
            }
            let kl = crate::ndiff::kl_diag_gaussians(
                &post.as_gaussian(),
                &DiagGaussian::standard(cfg.z_dim),
            )
            .unwrap();
            oracle += -recon + kl;
        }
        oracle /= batches.len() as f64;
        assert!((value - oracle).abs() < 1e-9, "{value} vs {oracle}");
    }

    #[test]
    fn embedding_loss_rejects_empty_contexts() {
        let nets = EmbedNets::new(EmbedConfig::tiny(), &mut rng(18));
        let batch = ContextBatch {
            task_id: 0,
            context: vec![],
            targets: vec![],
        };
        assert!(nets.embedding_loss(&[batch], &[vec![0.0; 2]]).is_err());
    }

    #[test]
    fn embedding_loss_gradient_passes_fd_check() {
        let cfg = EmbedConfig::tiny();
        let mut nets = EmbedNets::new(cfg, &mut rng(19));
        // Zero-initialized biases put relu pre-activations exactly on the
        // kink; randomize so finite differences see a smooth neighborhood.
        nets.params.randomize(0.5, &mut rng(190));
        let mut r = rng(20);
        let batches: Vec<ContextBatch> = (0..2)
            .map(|i| ContextBatch {
                task_id: i as u64,
                context: (0..3).map(|_| random_transition(&mut r)).collect(),
                targets: vec![],
            })
            .collect();
        let noise = nets.draw_z_noise(batches.len(), &mut r);
        let (_, analytic) = nets.embedding_loss(&batches, &noise).unwrap();
        let numeric = crate::ndiff::check::fd_grad(&nets.params, 1e-5, |p| {
            let probe = EmbedNets::from_params(cfg, p.clone());
            probe.embedding_loss(&batches, &noise).unwrap().0
        });
        let err = crate::ndiff::check::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let mut nets = EmbedNets::new(EmbedConfig::tiny(), &mut rng(21));
        let before = nets.params.clone();
        let mut buf = TaskBuffer::new(0, 100);
        let mut r = rng(22);
        for _ in 0..20 {
            buf.add(random_transition(&mut r));
        }
        let opts = PretrainOpts {
            steps: 0,
            tasks_per_step: 1,
            k_min: 2,
            k_max: 8,
            targets_per_context: 1,
            lr: 3e-4,
        };
        let losses = pretrain_embedding(&mut nets, &[buf], &opts, &mut r).unwrap();
        assert!(losses.is_empty());
        assert_eq!(nets.params, before);
    }

    #[test]
    fn sample_indices_covers_and_truncates() {
        let mut r = rng(23);
        let all = sample_indices(4, 10, &mut r);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let some = sample_indices(10, 3, &mut r);
        assert_eq!(some.len(), 3);
        let mut dedup = some.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 3);
    }
}
