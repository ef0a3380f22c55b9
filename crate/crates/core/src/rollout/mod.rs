//! Multistep consistency sampling and its MDP view.
//!
//! A rollout starts at `x_{τ0} = T·z`. At step `t` the policy mean is
//! `f(x_{τt}, τt, c)` and the action is `mean + std_t·z_t`, which becomes the
//! next state. `std_t = √(τ_{t+1}² − ε²)` vanishes at the last step, so that
//! step is deterministic and the terminal sample is its output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::consistency::ConsistencyModel;
use crate::error::{contract, Error, Result};
use crate::nn::{gaussian_logprob_row, ParamStore, Tape, Tensor, Var};
use crate::rng::{normals, stream};
use crate::scalar::Scalar;

/// Decreasing times `T = τ0 > τ1 > … > τH = ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<S: Scalar = f64> {
    points: Vec<S>,
    rho: f64,
}

impl<S: Scalar> TimeGrid<S> {
    pub fn horizon(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[S] {
        &self.points
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_max(&self) -> S {
        self.points[0]
    }

    pub fn eps(&self) -> S {
        self.points[self.points.len() - 1]
    }
}

/// `τi = (T^{1/ρ} + (i/H)(ε^{1/ρ} − T^{1/ρ}))^ρ`, with both endpoints exact.
pub fn karras_grid<S: Scalar>(h: usize, eps: f64, t_max: f64, rho: f64) -> Result<TimeGrid<S>> {
    if h == 0 {
        return Err(contract("horizon must be at least 1"));
    }
    if !(eps > 0.0 && eps < t_max && t_max.is_finite()) {
        return Err(contract(format!("need 0 < eps < T, got eps={eps} T={t_max}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(contract(format!("rho must be positive, got {rho}")));
    }
    let (a, b) = (t_max.powf(1.0 / rho), eps.powf(1.0 / rho));
    let mut points: Vec<S> = (0..=h)
        .map(|i| S::lit((a + (i as f64 / h as f64) * (b - a)).powf(rho)))
        .collect();
    points[0] = S::lit(t_max);
    points[h] = S::lit(eps);
    if points.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(contract(format!("grid with H={h} is not strictly decreasing at this precision")));
    }
    Ok(TimeGrid { points, rho })
}

/// Noise scale that carries a sample at the boundary to level `tau`.
#[inline]
pub fn renoise_std<S: Scalar>(tau: S, eps: S) -> S {
    (tau * tau - eps * eps).max(S::zero()).sqrt()
}

/// Log-density of `a` under N(mean, std²·I).
pub fn gaussian_logprob<S: Scalar>(mean: &Tensor<S>, std: S, a: &Tensor<S>) -> Result<S> {
    if !(std > S::zero()) {
        return Err(contract(format!("std must be positive, got {std}")));
    }
    mean.expect_same_shape(a, "gaussian_logprob")?;
    Ok(gaussian_logprob_row(mean.data(), a.data(), std))
}

/// Multistep sampling from `x_T = T·z`: apply `f`, renoise to the next grid
/// time, apply `f` again, down to the last interior time.
pub fn multistep_sample<S: Scalar, R: Rng + ?Sized>(
    model: &ConsistencyModel<S>,
    grid: &TimeGrid<S>,
    c: usize,
    rng: &mut R,
) -> Result<Tensor<S>> {
    check_grid(model, grid)?;
    let d = model.data_dim();
    let t_max = grid.t_max();
    let x_t: Vec<S> = normals::<S, _>(rng, d).into_iter().map(|z| t_max * z).collect();
    let mut x = model.apply(&Tensor::raw(vec![1, d], x_t), t_max, c)?;
    let eps = grid.eps();
    for &tau in &grid.points()[1..grid.horizon()] {
        let s = renoise_std(tau, eps);
        let z: Vec<S> = normals(rng, d);
        let noised: Vec<S> = x.data().iter().zip(&z).map(|(&m, &e)| m + s * e).collect();
        x = model.apply(&Tensor::raw(vec![1, d], noised), tau, c)?;
    }
    Ok(x)
}

fn check_grid<S: Scalar>(model: &ConsistencyModel<S>, grid: &TimeGrid<S>) -> Result<()> {
    if grid.t_max() != model.t_max() || grid.eps() != model.eps() {
        return Err(contract("time grid endpoints do not match the model"));
    }
    Ok(())
}

/// A Gaussian policy over a fixed number of denoising steps. Shared by the
/// consistency and diffusion arms so rollout, replay and update code is one
/// path.
pub trait Policy<S: Scalar>: Send + Sync {
    fn params(&self) -> &ParamStore<S>;
    fn params_mut(&mut self) -> &mut ParamStore<S>;
    fn data_dim(&self) -> usize;
    fn contexts(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Std of the action at step `t`; zero marks a deterministic step.
    fn step_std(&self, t: usize) -> S;
    /// Network evaluations per trajectory.
    fn model_calls(&self) -> usize;
    /// Scale of the initial state `x_{τ0} = scale·z`.
    fn initial_scale(&self) -> S;
    /// Records the policy means for rows `(state_i, step_i, context_i)` using
    /// `params` (the live parameters or a frozen copy).
    fn step_means(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        states: &Tensor<S>,
        steps: &[usize],
        contexts: &[usize],
    ) -> Result<Var>;

    fn stochastic_steps(&self) -> usize {
        (0..self.horizon()).filter(|&t| self.step_std(t) > S::zero()).count()
    }
}

/// The consistency model on a fixed time grid viewed as an MDP policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyPolicy<S: Scalar = f64> {
    pub model: ConsistencyModel<S>,
    grid: TimeGrid<S>,
}

impl<S: Scalar> ConsistencyPolicy<S> {
    pub fn new(model: ConsistencyModel<S>, grid: TimeGrid<S>) -> Result<Self> {
        check_grid(&model, &grid)?;
        Ok(Self { model, grid })
    }

    pub fn with_horizon(model: ConsistencyModel<S>, h: usize, rho: f64) -> Result<Self> {
        let cfg = model.config();
        let grid = karras_grid(h, cfg.eps, cfg.t_max, rho)?;
        Self::new(model, grid)
    }

    pub fn grid(&self) -> &TimeGrid<S> {
        &self.grid
    }

    pub fn into_model(self) -> ConsistencyModel<S> {
        self.model
    }
}

impl<S: Scalar> Policy<S> for ConsistencyPolicy<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.model.params
    }

    fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn contexts(&self) -> usize {
        self.model.contexts()
    }

    fn horizon(&self) -> usize {
        self.grid.horizon()
    }

    fn step_std(&self, t: usize) -> S {
        renoise_std(self.grid.points()[t + 1], self.grid.eps())
    }

    fn model_calls(&self) -> usize {
        self.grid.horizon()
    }

    fn initial_scale(&self) -> S {
        self.grid.t_max()
    }

    fn step_means(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        states: &Tensor<S>,
        steps: &[usize],
        contexts: &[usize],
    ) -> Result<Var> {
        let h = self.horizon();
        let times = steps
            .iter()
            .map(|&t| {
                if t < h {
                    Ok(self.grid.points()[t])
                } else {
                    Err(contract(format!("step {t} outside horizon {h}")))
                }
            })
            .collect::<Result<Vec<S>>>()?;
        self.model.apply_tape_with(tape, params, states, &times, contexts)
    }
}

/// One rollout. `states[t+1]` is the action taken at step `t`; log-probs are
/// stored only for steps with positive std, in step order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S: Scalar = f64> {
    pub context: usize,
    /// Global index; also the RNG stream the rollout drew from.
    pub index: u64,
    pub states: Vec<Vec<S>>,
    pub stds: Vec<S>,
    pub log_probs: Vec<S>,
    pub reward: f64,
    pub advantage: f64,
}

impl<S: Scalar> Trajectory<S> {
    pub fn horizon(&self) -> usize {
        self.stds.len()
    }

    pub fn state(&self, t: usize) -> &[S] {
        &self.states[t]
    }

    pub fn action(&self, t: usize) -> &[S] {
        &self.states[t + 1]
    }

    pub fn terminal(&self) -> &[S] {
        &self.states[self.states.len() - 1]
    }

    pub fn terminal_f64(&self) -> Vec<f64> {
        self.terminal().iter().map(|v| v.as_f64()).collect()
    }

    /// Steps that carry a log-prob, in the order of `log_probs`.
    pub fn stochastic_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.stds
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > S::zero())
            .map(|(t, _)| t)
    }
}

/// Rolls out one trajectory per context, trajectory `i` drawing all of its
/// noise from `rngs[i]`. Rows are evaluated as one batch per step.
pub fn rollout_batch<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    contexts: &[usize],
    indices: &[u64],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Trajectory<S>>> {
    let n = contexts.len();
    if rngs.len() != n || indices.len() != n {
        return Err(contract("one RNG stream and index per trajectory"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = policy.data_dim();
    let h = policy.horizon();
    let scale = policy.initial_scale();
    let mut x: Vec<S> = Vec::with_capacity(n * d);
    for rng in rngs.iter_mut() {
        x.extend(normals::<S, _>(rng, d).into_iter().map(|z| scale * z));
    }
    let mut out: Vec<Trajectory<S>> = (0..n)
        .map(|i| Trajectory {
            context: contexts[i],
            index: indices[i],
            states: vec![x[i * d..(i + 1) * d].to_vec()],
            stds: Vec::with_capacity(h),
            log_probs: Vec::new(),
            reward: 0.0,
            advantage: 0.0,
        })
        .collect();
    let mut steps = vec![0; n];
    for t in 0..h {
        steps.iter_mut().for_each(|s| *s = t);
        let mut tape = Tape::no_grad();
        let m = policy.step_means(&mut tape, policy.params(), &Tensor::raw(vec![n, d], x), &steps, contexts)?;
        let mean = tape.take_value(m);
        let std = policy.step_std(t);
        let mut next = Vec::with_capacity(n * d);
        for (i, traj) in out.iter_mut().enumerate() {
            let row = mean.row(i);
            let action: Vec<S> = if std > S::zero() {
                let z: Vec<S> = normals(&mut rngs[i], d);
                let a: Vec<S> = row.iter().zip(&z).map(|(&m, &e)| m + std * e).collect();
                let lp = gaussian_logprob_row(row, &a, std);
                if !lp.is_finite() {
                    return Err(Error::NonFinite(format!("log-prob of trajectory {} at step {t}", traj.index)));
                }
                traj.log_probs.push(lp);
                a
            } else {
                row.to_vec()
            };
            if action.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("state of trajectory {} at step {t}", traj.index)));
            }
            next.extend_from_slice(&action);
            traj.stds.push(std);
            traj.states.push(action);
        }
        x = next;
    }
    Ok(out)
}

/// Single rollout drawing from `rng`.
pub fn rollout<S: Scalar, P: Policy<S> + ?Sized>(policy: &P, c: usize, rng: ChaCha8Rng) -> Result<Trajectory<S>> {
    let mut rngs = [rng];
    Ok(rollout_batch(policy, &[c], &[0], &mut rngs)?.remove(0))
}

/// Trajectory `k` of the batch uses stream `(seed, first_index + k)`.
/// Results do not depend on `chunk` or on the pool.
pub fn collect<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    contexts: &[usize],
    seed: u64,
    first_index: u64,
    chunk: usize,
    pool: Option<&ThreadPool>,
) -> Result<Vec<Trajectory<S>>> {
    let chunk = chunk.max(1);
    let run = |(k, cs): (usize, &[usize])| {
        let indices: Vec<u64> = (0..cs.len()).map(|i| first_index + (k * chunk + i) as u64).collect();
        let mut rngs: Vec<ChaCha8Rng> = indices.iter().map(|&i| stream(seed, i)).collect();
        rollout_batch(policy, cs, &indices, &mut rngs)
    };
    let parts: Vec<Vec<Trajectory<S>>> = match pool {
        Some(pool) => pool.install(|| contexts.par_chunks(chunk).enumerate().map(run).collect::<Result<_>>())?,
        None => contexts.chunks(chunk).enumerate().map(run).collect::<Result<_>>()?,
    };
    Ok(parts.into_iter().flatten().collect())
}

/// Log-probs of the stored actions under `params`, recomputed from the
/// stored states.
pub fn replay_logprobs<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    params: &ParamStore<S>,
    traj: &Trajectory<S>,
) -> Result<Vec<S>> {
    let steps: Vec<usize> = traj.stochastic_steps().collect();
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let d = policy.data_dim();
    let states: Vec<S> = steps.iter().flat_map(|&t| traj.state(t).iter().copied()).collect();
    let mut tape = Tape::no_grad();
    let ctx = vec![traj.context; steps.len()];
    let m = policy.step_means(&mut tape, params, &Tensor::raw(vec![steps.len(), d], states), &steps, &ctx)?;
    let mean = tape.take_value(m);
    Ok(steps
        .iter()
        .enumerate()
        .map(|(r, &t)| gaussian_logprob_row(mean.row(r), traj.action(t), traj.stds[t]))
        .collect())
}

/// Builds a pool for `threads > 1`; `None` means run on the calling thread.
pub fn thread_pool(threads: usize) -> Result<Option<ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| contract(format!("thread pool: {e}")))
}
