//! Clipped policy-gradient fine-tuning shared by the consistency and
//! diffusion arms.
//!
//! Each epoch collects `batches_per_epoch × sample_batch` rollouts with the
//! current parameters, scores their terminal samples, turns rewards into
//! per-context normalized advantages and then runs `inner_epochs` passes of
//! minibatch updates over the pooled rollouts. The parameters at collection
//! time are kept as the frozen old policy for importance ratios.

pub mod stats;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{CpuClock, Stopwatch};
use crate::error::{contract, Error, Result};
use crate::nn::{adam_step, clip_grad_norm, AdamState, ParamStore, Tape, Tensor};
use crate::rewards::{QueryCounter, Reward};
use crate::rng::stream;
use crate::rollout::{collect, thread_pool, Policy, Trajectory};
use crate::scalar::Scalar;

pub use stats::{normalize_reward, ContextStats, STD_FLOOR};

/// Stream index of the trainer's own generator (context draws, shuffles).
/// Rollouts use indices counting up from 0.
const TRAINER_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_range: f64,
    pub adv_clip: f64,
    pub horizon: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub batches_per_epoch: usize,
    pub sample_batch: usize,
    pub train_batch: usize,
    pub grad_accum: usize,
    pub inner_epochs: usize,
    pub epochs: usize,
    pub buffer_size: usize,
    pub min_count: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_range: 1e-4,
            adv_clip: 10.0,
            horizon: 8,
            lr: 1e-4,
            max_grad_norm: 5.0,
            batches_per_epoch: 10,
            sample_batch: 4,
            train_batch: 2,
            grad_accum: 2,
            inner_epochs: 1,
            epochs: 100,
            buffer_size: 16,
            min_count: 16,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("batches_per_epoch", self.batches_per_epoch),
            ("sample_batch", self.sample_batch),
            ("train_batch", self.train_batch),
            ("grad_accum", self.grad_accum),
            ("inner_epochs", self.inner_epochs),
            ("buffer_size", self.buffer_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("`{name}` must be positive")));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(contract(format!("clip range must lie in (0, 1), got {}", self.clip_range)));
        }
        for (name, v) in [("adv_clip", self.adv_clip), ("lr", self.lr), ("max_grad_norm", self.max_grad_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(contract(format!("`{name}` must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Rollouts (and reward queries) per epoch.
    pub fn rollouts_per_epoch(&self) -> usize {
        self.batches_per_epoch * self.sample_batch
    }
}

/// `Σ_t min(A·r_t, A·clip(r_t, 1−ε, 1+ε))` with `r_t = exp(new_t − old_t)`.
pub fn clipped_surrogate(logp_new: &[f64], logp_old: &[f64], advantage: f64, eps_clip: f64) -> Result<f64> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::Shape(format!(
            "{} new and {} old log-probs",
            logp_new.len(),
            logp_old.len()
        )));
    }
    if !advantage.is_finite() {
        return Err(Error::NonFinite(format!("advantage {advantage}")));
    }
    let mut total = 0.0;
    for (t, (&n, &o)) in logp_new.iter().zip(logp_old).enumerate() {
        let ratio = (n - o).exp();
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!("importance ratio at step {t}")));
        }
        let un = ratio * advantage;
        let cl = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip) * advantage;
        total += if un <= cl { un } else { cl };
    }
    Ok(total)
}

/// Diagnostics of one minibatch pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean per-trajectory surrogate (to be maximized).
    pub surrogate: f64,
    /// Policy steps scored.
    pub steps: usize,
    /// Steps where the clipped branch was the smaller one.
    pub clipped: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl UpdateStats {
    pub fn clip_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.clipped as f64 / self.steps as f64
        }
    }
}

/// Adds `weight·∇(−surrogate)` for `batch` to the gradients of
/// `policy.params_mut()`, with ratios taken against `old`.
pub fn accumulate_surrogate_grad<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &mut P,
    old: &ParamStore<S>,
    batch: &[&Trajectory<S>],
    eps_clip: f64,
    weight: f64,
) -> Result<UpdateStats> {
    let d = policy.data_dim();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut steps = Vec::new();
    let mut contexts = Vec::new();
    let mut stds = Vec::new();
    let mut adv = Vec::new();
    for tr in batch {
        if !tr.advantage.is_finite() {
            return Err(Error::NonFinite(format!("advantage of trajectory {}", tr.index)));
        }
        for t in tr.stochastic_steps() {
            states.extend_from_slice(tr.state(t));
            actions.extend_from_slice(tr.action(t));
            steps.push(t);
            contexts.push(tr.context);
            stds.push(tr.stds[t]);
            adv.push(S::lit(tr.advantage));
        }
    }
    let n = steps.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let states = Tensor::raw(vec![n, d], states);
    let actions = Tensor::raw(vec![n, d], actions);

    let old_lp = {
        let mut tape = Tape::no_grad();
        let m = policy.step_means(&mut tape, old, &states, &steps, &contexts)?;
        let lp = tape.gaussian_logprob(m, actions.clone(), stds.clone())?;
        tape.take_value(lp)
    };

    let (lo, hi) = (S::lit(1.0 - eps_clip), S::lit(1.0 + eps_clip));
    let mut tape = Tape::new();
    let m = policy.step_means(&mut tape, policy.params(), &states, &steps, &contexts)?;
    let lp = tape.gaussian_logprob(m, actions, stds)?;
    let old_v = tape.input(old_lp);
    let diff = tape.sub(lp, old_v)?;
    let ratio = tape.exp(diff)?;
    let a = tape.input(Tensor::raw(vec![n, 1], adv));
    let un = tape.mul(ratio, a)?;
    let clipped_ratio = tape.clamp(ratio, lo, hi)?;
    let cl = tape.mul(clipped_ratio, a)?;
    let obj = tape.min(un, cl)?;
    let total = tape.sum(obj)?;
    let k = batch.len() as f64;
    let loss = tape.scale(total, S::lit(-weight / k))?;

    let ratios = tape.value(ratio).data();
    if let Some(r) = ratios.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!(
            "importance ratio of trajectory step row {r} (policy step {})",
            steps[r]
        )));
    }
    let mut stats = UpdateStats {
        surrogate: tape.value(total).data()[0].as_f64() / k,
        steps: n,
        clipped: 0,
        ratio_min: f64::INFINITY,
        ratio_max: f64::NEG_INFINITY,
    };
    for &r in ratios {
        stats.ratio_min = stats.ratio_min.min(r.as_f64());
        stats.ratio_max = stats.ratio_max.max(r.as_f64());
    }
    stats.clipped = tape
        .value(cl)
        .data()
        .iter()
        .zip(tape.value(un).data())
        .filter(|(c, u)| c < u)
        .count();
    tape.backward(loss, policy.params_mut())?;
    Ok(stats)
}

/// Gradient clipping followed by one Adam step. Returns the pre-clip norm.
pub fn apply_update<S: Scalar>(params: &mut ParamStore<S>, adam: &mut AdamState<S>, cfg: &TrainConfig) -> Result<f64> {
    let norm = params.grad_norm().as_f64();
    clip_grad_norm(params, S::lit(cfg.max_grad_norm))?;
    adam_step(params, adam, S::lit(cfg.lr))?;
    params.zero_grad();
    Ok(norm)
}

/// One full update on a single minibatch: recompute log-probs under the
/// current parameters, maximize the clipped surrogate, clip, step.
pub fn policy_update<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &mut P,
    old: &ParamStore<S>,
    adam: &mut AdamState<S>,
    batch: &[&Trajectory<S>],
    cfg: &TrainConfig,
) -> Result<(UpdateStats, f64)> {
    policy.params_mut().zero_grad();
    let stats = accumulate_surrogate_grad(policy, old, batch, cfg.clip_range, 1.0)?;
    let norm = apply_update(policy.params_mut(), adam, cfg)?;
    Ok((stats, norm))
}

/// One row of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Cumulative reward queries after this epoch's rollouts.
    pub reward_queries: u64,
    /// Mean raw reward of this epoch's rollouts, collected before its updates.
    pub reward_mean: f64,
    pub reward_std: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    /// Stochastic policy steps per trajectory.
    pub policy_steps: usize,
    /// Network evaluations per trajectory.
    pub model_calls: usize,
    pub cpu_seconds: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    fn check_finite(&self) -> Result<()> {
        let vals = [
            self.reward_mean,
            self.reward_std,
            self.surrogate,
            self.grad_norm,
            self.clip_fraction,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("metrics at epoch {}: {self:?}", self.epoch)));
        }
        Ok(())
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores terminal samples in trajectory order.
pub fn score_all<S: Scalar>(reward: &dyn Reward, trajs: &mut [Trajectory<S>]) -> Result<()> {
    for tr in trajs.iter_mut() {
        let r = reward.score(&tr.terminal_f64(), tr.context)?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("reward of trajectory {}", tr.index)));
        }
        tr.reward = r;
    }
    Ok(())
}

/// Fine-tunes `policy` against `reward`. `on_epoch` runs after each epoch's
/// updates (for checkpoints and metric files).
pub fn train<S: Scalar, P: Policy<S>>(
    policy: &mut P,
    reward: &QueryCounter,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&P, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let contexts = policy.contexts();
    let pool = thread_pool(cfg.threads)?;
    let clock = CpuClock::for_threads(cfg.threads);
    let mut rng = stream(cfg.seed, TRAINER_STREAM);
    let mut stats = ContextStats::new(contexts, cfg.buffer_size, cfg.min_count)?;
    let mut adam = AdamState::new(policy.params());
    let mut next_index = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let sw = Stopwatch::start(clock);
        let old = policy.params().clone();
        let ctx: Vec<usize> = (0..cfg.rollouts_per_epoch())
            .map(|_| rng.random_range(0..contexts))
            .collect();
        let mut trajs = collect(policy, &ctx, cfg.seed, next_index, cfg.sample_batch, pool.as_ref())?;
        next_index += trajs.len() as u64;
        score_all(reward, &mut trajs)?;
        for tr in trajs.iter_mut() {
            tr.advantage = normalize_reward(&mut stats, tr.context, tr.reward, cfg.adv_clip)?;
        }
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
        let (reward_mean, reward_std) = mean_std(&rewards);

        let mut sur = Vec::new();
        let mut norms = Vec::new();
        let (mut clipped, mut scored) = (0usize, 0usize);
        let weight = 1.0 / cfg.grad_accum as f64;
        for _ in 0..cfg.inner_epochs {
            let mut order: Vec<usize> = (0..trajs.len()).collect();
            order.shuffle(&mut rng);
            let minibatches: Vec<Vec<&Trajectory<S>>> = order
                .chunks(cfg.train_batch)
                .map(|ix| ix.iter().map(|&i| &trajs[i]).collect())
                .collect();
            for group in minibatches.chunks(cfg.grad_accum) {
                policy.params_mut().zero_grad();
                for mb in group {
                    let st = accumulate_surrogate_grad(policy, &old, mb, cfg.clip_range, weight)?;
                    sur.push(st.surrogate);
                    clipped += st.clipped;
                    scored += st.steps;
                }
                norms.push(apply_update(policy.params_mut(), &mut adam, cfg)?);
            }
        }
        let row = EpochMetrics {
            epoch,
            reward_queries: reward.count(),
            reward_mean,
            reward_std,
            surrogate: mean_std(&sur).0,
            grad_norm: mean_std(&norms).0,
            clip_fraction: if scored == 0 { 0.0 } else { clipped as f64 / scored as f64 },
            policy_steps: policy.stochastic_steps(),
            model_calls: policy.model_calls(),
            cpu_seconds: sw.cpu_seconds(),
            wall_seconds: sw.wall_seconds(),
        };
        row.check_finite()?;
        on_epoch(policy, &row)?;
        history.push(row);
    }
    Ok(history)
}

/// Mean and population std of `reward` over `n` fresh samples whose contexts
/// cycle through the vocabulary. Evaluation queries go to `reward` directly
/// and are not counted as training queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub std: f64,
    pub rewards: Vec<f64>,
}

pub fn evaluate<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    reward: &dyn Reward,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<Evaluation> {
    let contexts = policy.contexts();
    let ctx: Vec<usize> = (0..n).map(|i| i % contexts).collect();
    let pool = thread_pool(threads)?;
    let mut trajs = collect(policy, &ctx, seed, 0, 64, pool.as_ref())?;
    score_all(reward, &mut trajs)?;
    let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
    let (mean, std) = mean_std(&rewards);
    Ok(Evaluation { mean, std, rewards })
}
