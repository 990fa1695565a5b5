//! Proximal policy optimization over batched, domain-randomized episodes.
//!
//! Rollouts are collected from a vector of episodes stepped in parallel,
//! advantages come from generalized advantage estimation, and the update
//! maximizes the clipped surrogate objective with minibatch Adam steps.
//! Gradients are computed by backpropagation through the fixed MLP
//! topology; all randomness is derived from the config seed, so training
//! is bitwise reproducible for any worker-thread count.

use crate::error::LearnError;
use crate::policy::{squash_log_jacobian, Policy, ACTION_DIM};
use crate::tasks::{Episode, TaskConfig};
use cfb_core::config::KvMap;
use cfb_core::random::RandomizationSpec;
use cfb_core::rng::derive_rng;
use cfb_core::sim::SimConfig;
use cfb_core::ModelParams;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Fixed chunk width for deterministic parallel gradient accumulation.
const GRAD_CHUNK: usize = 512;

/// Trainer hyperparameters. Everything is configuration, not constants.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub n_envs: usize,
    pub total_steps: u64,
    pub segment_len: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    /// Critic output scale: the value head predicts `return / value_scale`,
    /// keeping its targets near unit magnitude despite the large failure
    /// penalty. Purely an optimization detail; logged returns are unscaled.
    pub value_scale: f64,
    /// Linearly decay the learning rate to zero over the step budget.
    pub lr_anneal: bool,
    /// Initial exploration log-std of the action head.
    pub log_std_init: f64,
    /// Initial pre-squash action bias (logistic(bias) is the start command).
    pub action_bias_init: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            lr: 1e-3,
            minibatch: 8192,
            epochs: 4,
            n_envs: 1024,
            total_steps: 30_000_000,
            segment_len: 64,
            entropy_coef: 0.0,
            value_coef: 0.5,
            grad_clip: 1.0,
            value_scale: 50.0,
            lr_anneal: true,
            log_std_init: -1.0,
            action_bias_init: 0.2,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Desk-scale preset: 128 environments, small minibatches.
    pub fn desk() -> Self {
        PpoConfig {
            n_envs: 128,
            minibatch: 2048,
            total_steps: 3_000_000,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(LearnError::InvalidConfig(
                "gamma and lambda must lie in [0, 1]".into(),
            ));
        }
        if !(self.clip > 0.0) {
            return Err(LearnError::InvalidConfig("clip must be > 0".into()));
        }
        if !(self.value_scale > 0.0) {
            return Err(LearnError::InvalidConfig("value_scale must be > 0".into()));
        }
        for (name, v) in [
            ("minibatch", self.minibatch),
            ("epochs", self.epochs),
            ("n_envs", self.n_envs),
            ("segment_len", self.segment_len),
        ] {
            if v == 0 {
                return Err(LearnError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("gamma", self.gamma);
        kv.set("lambda", self.lambda);
        kv.set("clip", self.clip);
        kv.set("lr", self.lr);
        kv.set("minibatch", self.minibatch);
        kv.set("epochs", self.epochs);
        kv.set("n_envs", self.n_envs);
        kv.set("total_steps", self.total_steps);
        kv.set("segment_len", self.segment_len);
        kv.set("entropy_coef", self.entropy_coef);
        kv.set("value_coef", self.value_coef);
        kv.set("grad_clip", self.grad_clip);
        kv.set("value_scale", self.value_scale);
        kv.set("lr_anneal", self.lr_anneal);
        kv.set("log_std_init", self.log_std_init);
        kv.set("action_bias_init", self.action_bias_init);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: &PpoConfig) -> Result<Self, LearnError> {
        kv.ensure_known(&[
            "gamma",
            "lambda",
            "clip",
            "lr",
            "minibatch",
            "epochs",
            "n_envs",
            "total_steps",
            "segment_len",
            "entropy_coef",
            "value_coef",
            "grad_clip",
            "value_scale",
            "lr_anneal",
            "log_std_init",
            "action_bias_init",
            "seed",
        ])
        .map_err(LearnError::Core)?;
        let cfg = PpoConfig {
            gamma: kv.f64_or("gamma", base.gamma)?,
            lambda: kv.f64_or("lambda", base.lambda)?,
            clip: kv.f64_or("clip", base.clip)?,
            lr: kv.f64_or("lr", base.lr)?,
            minibatch: kv.usize_or("minibatch", base.minibatch)?,
            epochs: kv.usize_or("epochs", base.epochs)?,
            n_envs: kv.usize_or("n_envs", base.n_envs)?,
            total_steps: kv.u64_or("total_steps", base.total_steps)?,
            segment_len: kv.usize_or("segment_len", base.segment_len)?,
            entropy_coef: kv.f64_or("entropy_coef", base.entropy_coef)?,
            value_coef: kv.f64_or("value_coef", base.value_coef)?,
            grad_clip: kv.f64_or("grad_clip", base.grad_clip)?,
            value_scale: kv.f64_or("value_scale", base.value_scale)?,
            lr_anneal: kv.bool_or("lr_anneal", base.lr_anneal)?,
            log_std_init: kv.f64_or("log_std_init", base.log_std_init)?,
            action_bias_init: kv.f64_or("action_bias_init", base.action_bias_init)?,
            seed: kv.u64_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Episode boundary after a step, for advantage bootstrapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Episode continues.
    None,
    /// Episode failed/ended; successor value is zero.
    Terminal,
    /// Episode was cut by the horizon; carries V of the successor state.
    Truncated(f64),
}

/// Generalized advantage estimation over one environment's segment.
///
/// `tail_value` bootstraps the value after the last step when the segment
/// ends mid-episode. Returns `(advantages, returns)` with
/// `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    boundaries: &[Boundary],
    tail_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), LearnError> {
    let t_len = rewards.len();
    if values.len() != t_len || boundaries.len() != t_len {
        return Err(LearnError::DimMismatch {
            what: "gae sequence lengths".into(),
            expected: t_len,
            got: values.len().min(boundaries.len()),
        });
    }
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let (v_next, cont) = match boundaries[t] {
            Boundary::Terminal => (0.0, 0.0),
            Boundary::Truncated(v) => (v, 0.0),
            Boundary::None => {
                if t + 1 < t_len {
                    (values[t + 1], 1.0)
                } else {
                    (tail_value, 1.0)
                }
            }
        };
        let delta = rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * cont * acc;
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    Ok((advantages, returns))
}

/// Flattened on-policy batch.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    /// Observations, one column per sample.
    pub obs: DMatrix<f64>,
    /// Pre-squash actions, one column per sample.
    pub z: DMatrix<f64>,
    pub old_logp: DVector<f64>,
    pub advantages: DVector<f64>,
    pub returns: DVector<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather the given sample indices into a dense sub-batch.
    pub fn gather(&self, idx: &[usize]) -> RolloutBatch {
        RolloutBatch {
            obs: self.obs.select_columns(idx),
            z: self.z.select_columns(idx),
            old_logp: DVector::from_fn(idx.len(), |i, _| self.old_logp[idx[i]]),
            advantages: DVector::from_fn(idx.len(), |i, _| self.advantages[idx[i]]),
            returns: DVector::from_fn(idx.len(), |i, _| self.returns[idx[i]]),
        }
    }

    fn columns(&self, start: usize, len: usize) -> RolloutBatch {
        RolloutBatch {
            obs: self.obs.columns(start, len).into(),
            z: self.z.columns(start, len).into(),
            old_logp: self.old_logp.rows(start, len).into(),
            advantages: self.advantages.rows(start, len).into(),
            returns: self.returns.rows(start, len).into(),
        }
    }
}

/// Loss terms of one evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

/// Differentiable PPO loss on a (mini)batch, with parameter gradients.
///
/// The loss is `-surrogate + value_coef * value_mse - entropy_coef *
/// gaussian_entropy`. Advantages are used as given (normalize beforehand).
pub fn loss_and_grads(
    policy: &Policy,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
) -> (LossStats, Policy) {
    let n = batch.len();
    debug_assert!(n > 0);
    let (mu, actor_cache) = policy.actor.forward_batch(&batch.obs);
    let (val, critic_cache) = policy.critic.forward_batch(&batch.obs);

    let inv_n = 1.0 / n as f64;
    let mut d_mu = DMatrix::zeros(ACTION_DIM, n);
    let mut d_val = DMatrix::zeros(1, n);
    let mut d_log_std = DVector::zeros(ACTION_DIM);
    let mut stats = LossStats::default();

    let sigma: Vec<f64> = (0..ACTION_DIM).map(|i| policy.log_std[i].exp()).collect();

    for j in 0..n {
        // New log-probability of the stored pre-squash action.
        let mut logp = 0.0;
        let mut resid = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let r = (batch.z[(i, j)] - mu[(i, j)]) / sigma[i];
            resid[i] = r;
            logp += -policy.log_std[i] - HALF_LN_2PI - 0.5 * r * r;
            logp -= squash_log_jacobian(batch.z[(i, j)]);
        }
        let ratio = (logp - batch.old_logp[j]).exp();
        let adv = batch.advantages[j];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
        let surrogate = unclipped.min(clipped);
        stats.policy -= surrogate * inv_n;
        stats.mean_ratio += ratio * inv_n;
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_fraction += inv_n;
        }

        // d(-surrogate)/d(logp): active only on the unclipped branch.
        let active = if adv >= 0.0 {
            ratio <= 1.0 + cfg.clip
        } else {
            ratio >= 1.0 - cfg.clip
        };
        if active {
            let g = -unclipped * inv_n;
            for i in 0..ACTION_DIM {
                // d logp / d mu = resid / sigma.
                d_mu[(i, j)] = g * resid[i] / sigma[i];
                // d logp / d log_std = resid^2 - 1.
                d_log_std[i] += g * (resid[i] * resid[i] - 1.0);
            }
        }

        let verr = val[(0, j)] - batch.returns[j] / cfg.value_scale;
        stats.value += verr * verr * inv_n;
        d_val[(0, j)] = cfg.value_coef * 2.0 * verr * inv_n;
    }

    stats.entropy = policy.gaussian_entropy();
    for i in 0..ACTION_DIM {
        d_log_std[i] -= cfg.entropy_coef;
    }
    stats.total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * stats.entropy;

    let mut grads = policy.zeros_like();
    policy.actor.backward_batch(&actor_cache, d_mu, &mut grads.actor);
    policy
        .critic
        .backward_batch(&critic_cache, d_val, &mut grads.critic);
    grads.log_std += d_log_std;
    (stats, grads)
}

/// Chunked, deterministic parallel version of `loss_and_grads`.
fn loss_and_grads_parallel(
    policy: &Policy,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
) -> (LossStats, Policy) {
    let n = batch.len();
    if n <= GRAD_CHUNK {
        return loss_and_grads(policy, batch, cfg);
    }
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(GRAD_CHUNK)
        .map(|s| (s, GRAD_CHUNK.min(n - s)))
        .collect();
    let parts: Vec<(LossStats, Policy, usize)> = ranges
        .par_iter()
        .map(|&(start, len)| {
            let sub = batch.columns(start, len);
            let (stats, grads) = loss_and_grads(policy, &sub, cfg);
            (stats, grads, len)
        })
        .collect();
    // Ordered reduction keeps the result identical for any thread count.
    let mut grads = policy.zeros_like();
    let mut stats = LossStats::default();
    for (s, g, len) in &parts {
        let wt = *len as f64 / n as f64;
        stats.policy += s.policy * wt;
        stats.value += s.value * wt;
        stats.clip_fraction += s.clip_fraction * wt;
        stats.mean_ratio += s.mean_ratio * wt;
        let mut gs = grads.param_slices_mut();
        let ps = g.param_slices();
        for (dst, src) in gs.iter_mut().zip(ps.iter()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += s * wt;
            }
        }
    }
    stats.entropy = policy.gaussian_entropy();
    stats.total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * stats.entropy;
    // The per-chunk gradients already carry 1/len weights; the wt factor
    // above rescales them to 1/n. The log-std entropy term must not be
    // double counted: each chunk subtracted entropy_coef once.
    (stats, grads)
}

/// Adam optimizer state shaped like the policy.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Policy,
    v: Policy,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(policy: &Policy) -> Self {
        Adam {
            m: policy.zeros_like(),
            v: policy.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Policy, grads: &Policy, lr: f64) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        let mut ps = params.param_slices_mut();
        let gs = grads.param_slices();
        let mut ms = self.m.param_slices_mut();
        let mut vs = self.v.param_slices_mut();
        for k in 0..ps.len() {
            let p = &mut ps[k];
            let g = gs[k];
            let m = &mut ms[k];
            let v = &mut vs[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / b1c;
                let vhat = v[i] / b2c;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn slice_group_norm(slices: &[&[f64]]) -> f64 {
    slices
        .iter()
        .map(|s| s.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn scale_group(slices: &mut [&mut [f64]], scale: f64) {
    for s in slices.iter_mut() {
        for x in s.iter_mut() {
            *x *= scale;
        }
    }
}

/// L2 norm caps applied separately to the actor (with its log-std) and the
/// critic, so a noisy value fit cannot starve the policy gradient.
/// Returns the combined pre-clip norm.
pub fn clip_grad_norm(grads: &mut Policy, cap: f64) -> f64 {
    let n_actor = grads.actor.layers.len() * 2 + 1;
    let all = grads.param_slices();
    let actor_norm = slice_group_norm(&all[..n_actor]);
    let critic_norm = slice_group_norm(&all[n_actor..]);
    drop(all);
    if cap > 0.0 {
        let mut all = grads.param_slices_mut();
        if actor_norm > cap {
            scale_group(&mut all[..n_actor], cap / actor_norm);
        }
        if critic_norm > cap {
            scale_group(&mut all[n_actor..], cap / critic_norm);
        }
    }
    (actor_norm * actor_norm + critic_norm * critic_norm).sqrt()
}

/// Stats of one `ppo_update` call.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub loss: LossStats,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// One PPO update over a collected batch: advantage normalization, then
/// `epochs` passes of shuffled minibatch Adam steps.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    batch: &mut RolloutBatch,
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<UpdateStats, LearnError> {
    ppo_update_with_lr(policy, batch, cfg, adam, rng, cfg.lr)
}

/// `ppo_update` with an externally scheduled learning rate.
pub fn ppo_update_with_lr<R: Rng + ?Sized>(
    policy: &mut Policy,
    batch: &mut RolloutBatch,
    cfg: &PpoConfig,
    adam: &mut Adam,
    rng: &mut R,
    lr: f64,
) -> Result<UpdateStats, LearnError> {
    let n = batch.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    // Normalize advantages once per batch.
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch
        .advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(1e-8);
    for a in batch.advantages.iter_mut() {
        *a = (*a - mean) / std;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for mb in idx.chunks(cfg.minibatch.min(n)) {
            let sub = batch.gather(mb);
            let (loss, mut grads) = loss_and_grads_parallel(policy, &sub, cfg);
            if !loss.total.is_finite() {
                return Err(LearnError::Numerical(format!(
                    "non-finite loss: policy {} value {} entropy {}",
                    loss.policy, loss.value, loss.entropy
                )));
            }
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(policy, &grads, lr);
            stats.loss = loss;
            stats.grad_norm = norm;
            stats.minibatches += 1;
        }
    }
    Ok(stats)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct IterLog {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub mean_ep_len: f64,
    pub failure_rate: f64,
    pub stats: UpdateStats,
}

/// Per-iteration training log with the CSV schema
/// `iteration,env_steps,mean_return,mean_ep_len,failure_rate`.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<IterLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,env_steps,mean_return,mean_ep_len,failure_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.env_steps, r.mean_return, r.mean_ep_len, r.failure_rate
            ));
        }
        out
    }
}

/// Train a policy on the given task under domain randomization.
///
/// Every episode reset draws fresh randomized parameters and attitude
/// offset. `on_iter` runs after each iteration (checkpointing, logging).
pub fn train(
    task: &TaskConfig,
    nominal: &ModelParams,
    dr: &RandomizationSpec,
    sim: &SimConfig,
    cfg: &PpoConfig,
    mut on_iter: Option<&mut dyn FnMut(&Policy, &IterLog)>,
) -> Result<(Policy, TrainLog), LearnError> {
    cfg.validate()?;
    task.validate()?;
    let obs_dim = task.obs_dim();
    let mut policy = Policy::init_custom(
        obs_dim,
        &Policy::dims_for(obs_dim)[1..],
        cfg.log_std_init,
        cfg.action_bias_init,
        &mut derive_rng(cfg.seed, "policy-init", 0),
    );
    let mut adam = Adam::new(&policy);
    let mut trainer_rng = derive_rng(cfg.seed, "trainer", 0);

    let mut envs: Vec<Episode> = (0..cfg.n_envs)
        .map(|e| {
            Episode::new(
                task.clone(),
                SimConfig {
                    seed: cfb_core::rng::derive_seed(cfg.seed, "env-sim", e as u64),
                    ..sim.clone()
                },
                nominal.clone(),
                dr.clone(),
                derive_rng(cfg.seed, "env", e as u64),
            )
        })
        .collect::<Result<_, _>>()?;
    let mut action_rngs: Vec<_> = (0..cfg.n_envs)
        .map(|e| derive_rng(cfg.seed, "action", e as u64))
        .collect();

    let steps_per_iter = (cfg.n_envs * cfg.segment_len) as u64;
    let n_iters = (cfg.total_steps / steps_per_iter) as usize;

    let mut log = TrainLog::default();
    let n_envs = cfg.n_envs;
    let t_len = cfg.segment_len;
    let mut obs: Vec<DVector<f64>> = envs.iter().map(|e| e.observation()).collect();

    // Per-env episode accumulators for the log.
    let mut ep_return = vec![0.0; n_envs];
    let mut ep_len = vec![0usize; n_envs];

    let mut env_steps: u64 = 0;
    for iteration in 0..n_iters {
        let n_samples = n_envs * t_len;
        let mut batch_obs = DMatrix::zeros(obs_dim, n_samples);
        let mut batch_z = DMatrix::zeros(ACTION_DIM, n_samples);
        let mut old_logp = DVector::zeros(n_samples);
        let mut values = vec![0.0; n_samples];
        let mut rewards = vec![0.0; n_samples];
        let mut boundaries = vec![Boundary::None; n_samples];

        let mut finished_returns: Vec<f64> = Vec::new();
        let mut finished_lens: Vec<usize> = Vec::new();
        let mut finished_failures: usize = 0;

        for t in 0..t_len {
            // Batched policy/value forward over all envs.
            let x = DMatrix::from_fn(obs_dim, n_envs, |i, e| obs[e][i]);
            let (mu, _) = policy.actor.forward_batch(&x);
            let (val, _) = policy.critic.forward_batch(&x);

            // Sample actions sequentially (cheap), step physics in parallel.
            let mut commands = Vec::with_capacity(n_envs);
            for e in 0..n_envs {
                let col = e * t_len + t;
                let mut z = [0.0; ACTION_DIM];
                let mean = mu.column(e);
                for i in 0..ACTION_DIM {
                    z[i] = mean[i]
                        + policy.log_std[i].exp()
                            * action_rngs[e].sample::<f64, _>(StandardNormal);
                }
                let s = policy.sample_from_mean(&mean.clone_owned(), z);
                batch_obs.set_column(col, &obs[e]);
                for i in 0..ACTION_DIM {
                    batch_z[(i, col)] = z[i];
                }
                old_logp[col] = s.log_prob;
                values[col] = val[(0, e)] * cfg.value_scale;
                commands.push(s.u);
            }

            let results: Vec<_> = envs
                .par_iter_mut()
                .zip(commands.par_iter())
                .map(|(env, &u)| {
                    let r = env.step(u)?;
                    // Bootstrap across horizon truncation with the critic's
                    // value of the successor state.
                    let boundary = if r.outcome.terminal {
                        if r.outcome.failure.is_some() {
                            Boundary::Terminal
                        } else {
                            Boundary::Truncated(policy.value_one(&r.obs) * cfg.value_scale)
                        }
                    } else {
                        Boundary::None
                    };
                    Ok::<_, LearnError>((r, boundary))
                })
                .collect();

            for e in 0..n_envs {
                let col = e * t_len + t;
                let (r, boundary) = match &results[e] {
                    Ok(v) => v,
                    Err(err) => {
                        return Err(LearnError::Numerical(format!(
                            "env {e} aborted at iteration {iteration}: {err}"
                        )))
                    }
                };
                rewards[col] = r.reward;
                boundaries[col] = *boundary;
                ep_return[e] += r.reward;
                ep_len[e] += 1;
                if r.outcome.terminal {
                    finished_returns.push(ep_return[e]);
                    finished_lens.push(ep_len[e]);
                    if r.outcome.failure.is_some() {
                        finished_failures += 1;
                    }
                    ep_return[e] = 0.0;
                    ep_len[e] = 0;
                    envs[e].reset()?;
                    obs[e] = envs[e].observation();
                } else {
                    obs[e] = r.obs.clone();
                }
            }
        }
        env_steps += steps_per_iter;

        // Tail bootstrap for segments that ended mid-episode.
        let x = DMatrix::from_fn(obs_dim, n_envs, |i, e| obs[e][i]);
        let (tail_vals, _) = policy.critic.forward_batch(&x);

        let mut advantages = DVector::zeros(n_samples);
        let mut returns = DVector::zeros(n_samples);
        for e in 0..n_envs {
            let lo = e * t_len;
            let (adv, ret) = compute_gae(
                &rewards[lo..lo + t_len],
                &values[lo..lo + t_len],
                &boundaries[lo..lo + t_len],
                tail_vals[(0, e)] * cfg.value_scale,
                cfg.gamma,
                cfg.lambda,
            )?;
            for t in 0..t_len {
                advantages[lo + t] = adv[t];
                returns[lo + t] = ret[t];
            }
        }

        let mut batch = RolloutBatch {
            obs: batch_obs,
            z: batch_z,
            old_logp,
            advantages,
            returns,
        };
        let lr = if cfg.lr_anneal && n_iters > 0 {
            cfg.lr * (1.0 - iteration as f64 / n_iters as f64)
        } else {
            cfg.lr
        };
        let stats =
            ppo_update_with_lr(&mut policy, &mut batch, cfg, &mut adam, &mut trainer_rng, lr)?;

        let (mean_return, mean_ep_len) = if finished_returns.is_empty() {
            (
                ep_return.iter().sum::<f64>() / n_envs as f64,
                ep_len.iter().sum::<usize>() as f64 / n_envs as f64,
            )
        } else {
            (
                finished_returns.iter().sum::<f64>() / finished_returns.len() as f64,
                finished_lens.iter().sum::<usize>() as f64 / finished_lens.len() as f64,
            )
        };
        let failure_rate = if finished_returns.is_empty() {
            0.0
        } else {
            finished_failures as f64 / finished_returns.len() as f64
        };
        let row = IterLog {
            iteration,
            env_steps,
            mean_return,
            mean_ep_len,
            failure_rate,
            stats,
        };
        if let Some(cb) = on_iter.as_mut() {
            cb(&policy, &row);
        }
        log.rows.push(row);
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ForwardMode;
    use approx::assert_abs_diff_eq;
    use cfb_core::rng::derive_rng;

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, 1.0, 1.5];
        let bounds = [Boundary::None, Boundary::None, Boundary::Terminal];
        let (adv, ret) = compute_gae(&rewards, &values, &bounds, 9.0, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(adv[0], 1.0 + 0.9 * 1.0 - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], 2.0 + 0.9 * 1.5 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[2], 3.0 - 1.5, epsilon = 1e-12);
        for t in 0..3 {
            assert_abs_diff_eq!(ret[t], adv[t] + values[t], epsilon = 1e-12);
        }
    }

    #[test]
    fn gae_monte_carlo_case_is_suffix_sum() {
        let rewards = [1.0, -2.0, 0.5, 4.0];
        let values = [0.0; 4];
        let bounds = [
            Boundary::None,
            Boundary::None,
            Boundary::None,
            Boundary::Terminal,
        ];
        let (adv, _) = compute_gae(&rewards, &values, &bounds, 5.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(adv[0], 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[2], 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[3], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn gae_all_zero_rewards_and_values() {
        let rewards = [0.0; 5];
        let values = [0.0; 5];
        let bounds = [Boundary::None; 5];
        let (adv, ret) = compute_gae(&rewards, &values, &bounds, 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(ret.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn gae_matches_brute_force_oracle() {
        // O(T^2) oracle: A_t = sum_l (gamma*lambda)^l * delta_{t+l}, cut at
        // episode boundaries; truncation bootstraps the final delta.
        let mut rng = derive_rng(1, "gae", 0);
        for case in 0..20 {
            let t_len = 50;
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut bounds = vec![Boundary::None; t_len];
            for t in 0..t_len {
                if rng.gen_bool(0.1) {
                    bounds[t] = if rng.gen_bool(0.5) {
                        Boundary::Terminal
                    } else {
                        Boundary::Truncated(rng.gen_range(-1.0..1.0))
                    };
                }
            }
            let tail = rng.gen_range(-1.0..1.0);
            let gamma = 0.97;
            let lambda = 0.9;
            let (adv, _) =
                compute_gae(&rewards, &values, &bounds, tail, gamma, lambda).unwrap();

            for t in 0..t_len {
                let mut expect = 0.0;
                let mut w = 1.0;
                for l in t..t_len {
                    let (v_next, stop) = match bounds[l] {
                        Boundary::Terminal => (0.0, true),
                        Boundary::Truncated(v) => (v, true),
                        Boundary::None => {
                            if l + 1 < t_len {
                                (values[l + 1], false)
                            } else {
                                (tail, false)
                            }
                        }
                    };
                    expect += w * (rewards[l] + gamma * v_next - values[l]);
                    if stop {
                        break;
                    }
                    w *= gamma * lambda;
                }
                assert!(
                    (adv[t] - expect).abs() < 1e-10,
                    "case {case} t {t}: {} vs {expect}",
                    adv[t]
                );
            }
        }
    }

    fn toy_batch(policy: &Policy, n: usize, seed: u64) -> RolloutBatch {
        let mut rng = derive_rng(seed, "toy-batch", 0);
        let obs_dim = policy.obs_dim();
        let obs = DMatrix::from_fn(obs_dim, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut z = DMatrix::zeros(ACTION_DIM, n);
        let mut old_logp = DVector::zeros(n);
        for j in 0..n {
            let mean = policy.actor.forward_one(&obs.column(j).clone_owned());
            let mut zz = [0.0; ACTION_DIM];
            for i in 0..ACTION_DIM {
                zz[i] = mean[i] + rng.gen_range(-0.8..0.8);
            }
            let s = policy.sample_from_mean(&mean, zz);
            for i in 0..ACTION_DIM {
                z[(i, j)] = zz[i];
            }
            // Perturb the stored logp so ratios differ from 1.
            old_logp[j] = s.log_prob + rng.gen_range(-0.1..0.1);
        }
        RolloutBatch {
            obs,
            z,
            old_logp,
            advantages: DVector::from_fn(n, |_, _| rng.gen_range(-1.5..1.5)),
            returns: DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = derive_rng(2, "fd", 0);
        let mut policy = Policy::init_with(6, &[8, 8], &mut rng);
        policy.log_std.fill(-0.3);
        let batch = toy_batch(&policy, 16, 3);
        let cfg = PpoConfig {
            entropy_coef: 0.01,
            value_coef: 0.7,
            ..PpoConfig::default()
        };
        let (_, grads) = loss_and_grads(&policy, &batch, &cfg);
        let g = grads.param_slices();

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let n_slices = g.len();
        for k in 0..n_slices {
            let len = g[k].len();
            for i in (0..len).step_by(7) {
                let mut plus = policy.clone();
                plus.param_slices_mut()[k][i] += h;
                let (lp, _) = loss_and_grads(&plus, &batch, &cfg);
                let mut minus = policy.clone();
                minus.param_slices_mut()[k][i] -= h;
                let (lm, _) = loss_and_grads(&minus, &batch, &cfg);
                let fd = (lp.total - lm.total) / (2.0 * h);
                let denom = fd.abs().max(g[k][i].abs()).max(1e-6);
                worst = worst.max((fd - g[k][i]).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative gradient error {worst:.3e}");
    }

    #[test]
    fn clipped_branch_zeroes_policy_gradient() {
        let mut rng = derive_rng(4, "clip", 0);
        let policy = Policy::init_with(5, &[6], &mut rng);
        let mut batch = toy_batch(&policy, 4, 5);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            clip: 0.2,
            ..PpoConfig::default()
        };
        // Force ratio = 2 with positive advantage: clipped, zero gradient.
        for j in 0..batch.len() {
            let mean = policy.actor.forward_one(&batch.obs.column(j).clone_owned());
            let s = policy.sample_from_mean(
                &mean,
                [batch.z[(0, j)], batch.z[(1, j)], batch.z[(2, j)], batch.z[(3, j)]],
            );
            batch.old_logp[j] = s.log_prob - 2.0_f64.ln();
            batch.advantages[j] = 1.0;
        }
        let (stats, grads) = loss_and_grads(&policy, &batch, &cfg);
        assert!(stats.clip_fraction > 0.99);
        let norm: f64 = grads
            .param_slices()
            .iter()
            .map(|s| s.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(norm, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ratio_one_gradient_equals_vanilla_policy_gradient() {
        let mut rng = derive_rng(5, "pg", 0);
        let policy = Policy::init_with(5, &[6], &mut rng);
        let mut batch = toy_batch(&policy, 8, 6);
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            value_coef: 0.0,
            ..PpoConfig::default()
        };
        // Exact on-policy logp: ratio = 1 everywhere.
        for j in 0..batch.len() {
            let mean = policy.actor.forward_one(&batch.obs.column(j).clone_owned());
            let s = policy.sample_from_mean(
                &mean,
                [batch.z[(0, j)], batch.z[(1, j)], batch.z[(2, j)], batch.z[(3, j)]],
            );
            batch.old_logp[j] = s.log_prob;
        }
        let (stats, grads) = loss_and_grads(&policy, &batch, &cfg);
        assert_abs_diff_eq!(stats.mean_ratio, 1.0, epsilon = 1e-12);

        // Vanilla policy gradient of -mean(logp * A) via finite differences.
        let h = 1e-6;
        let eval = |p: &Policy| -> f64 {
            let mut total = 0.0;
            for j in 0..batch.len() {
                let mean = p.actor.forward_one(&batch.obs.column(j).clone_owned());
                let s = p.sample_from_mean(
                    &mean,
                    [batch.z[(0, j)], batch.z[(1, j)], batch.z[(2, j)], batch.z[(3, j)]],
                );
                total -= s.log_prob * batch.advantages[j];
            }
            total / batch.len() as f64
        };
        let g = grads.param_slices();
        for k in 0..g.len() {
            for i in (0..g[k].len()).step_by(5) {
                let mut plus = policy.clone();
                plus.param_slices_mut()[k][i] += h;
                let mut minus = policy.clone();
                minus.param_slices_mut()[k][i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = fd.abs().max(g[k][i].abs()).max(1e-6);
                assert!(
                    ((fd - g[k][i]).abs() / denom) < 1e-4,
                    "slice {k} index {i}: fd {fd} vs {grad}",
                    grad = g[k][i]
                );
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut rng = derive_rng(6, "lr0", 0);
        let mut policy = Policy::init_with(5, &[6], &mut rng);
        let reference = policy.clone();
        let mut batch = toy_batch(&policy, 32, 7);
        let cfg = PpoConfig {
            lr: 0.0,
            minibatch: 16,
            epochs: 2,
            ..PpoConfig::default()
        };
        let mut adam = Adam::new(&policy);
        let mut urng = derive_rng(6, "upd", 0);
        ppo_update(&mut policy, &mut batch, &cfg, &mut adam, &mut urng).unwrap();
        assert_eq!(policy, reference);
    }

    #[test]
    fn chunked_parallel_grads_match_serial() {
        let mut rng = derive_rng(7, "par", 0);
        let policy = Policy::init_with(6, &[8, 8], &mut rng);
        let batch = toy_batch(&policy, 2048, 8);
        let cfg = PpoConfig::default();
        let (s_serial, g_serial) = loss_and_grads(&policy, &batch, &cfg);
        let (s_par, g_par) = loss_and_grads_parallel(&policy, &batch, &cfg);
        assert_abs_diff_eq!(s_serial.policy, s_par.policy, epsilon = 1e-12);
        assert_abs_diff_eq!(s_serial.value, s_par.value, epsilon = 1e-12);
        let a = g_serial.param_slices();
        let b = g_par.param_slices();
        for k in 0..a.len() {
            for i in 0..a[k].len() {
                assert_abs_diff_eq!(a[k][i], b[k][i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_eval_ignores_advantage_normalization_and_rng() {
        let mut rng = derive_rng(8, "det", 0);
        let policy = Policy::init_with(5, &[6], &mut rng);
        let obs = DVector::from_element(5, 0.25);
        let mut r1 = derive_rng(100, "a", 0);
        let mut r2 = derive_rng(200, "b", 0);
        let a = policy.act(&obs, ForwardMode::Deterministic, &mut r1).unwrap();
        let b = policy.act(&obs, ForwardMode::Deterministic, &mut r2).unwrap();
        assert_eq!(a.u.as_vector(), b.u.as_vector());
    }

    #[test]
    fn zero_total_steps_returns_initial_params() {
        let task = TaskConfig::target_task();
        let cfg = PpoConfig {
            n_envs: 2,
            total_steps: 0,
            segment_len: 4,
            minibatch: 8,
            ..PpoConfig::default()
        };
        let (policy, log) = train(
            &task,
            &ModelParams::cfb_guards(),
            &RandomizationSpec::train().with_magnitude(0.0),
            &SimConfig::default(),
            &cfg,
            None,
        )
        .unwrap();
        assert!(log.rows.is_empty());
        let fresh = Policy::init_custom(
            task.obs_dim(),
            &Policy::dims_for(task.obs_dim())[1..],
            cfg.log_std_init,
            cfg.action_bias_init,
            &mut derive_rng(cfg.seed, "policy-init", 0),
        );
        assert_eq!(policy, fresh);
    }

    #[test]
    fn short_training_run_is_reproducible() {
        let task = TaskConfig::target_task();
        let cfg = PpoConfig {
            n_envs: 4,
            total_steps: 4 * 8 * 3,
            segment_len: 8,
            minibatch: 32,
            epochs: 2,
            ..PpoConfig::default()
        };
        let run = || {
            train(
                &task,
                &ModelParams::cfb_guards(),
                &RandomizationSpec::train(),
                &SimConfig::default(),
                &cfg,
                None,
            )
            .unwrap()
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1.to_csv(), l2.to_csv());
        assert_eq!(l1.rows.len(), 3);
    }
}
