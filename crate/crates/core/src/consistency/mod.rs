//! Consistency function, variance-exploding forward process and consistency
//! training.
//!
//! The model is `f(x, t, c) = c_skip(t)·x + c_out(t)·F(c_in(t)·x, t, c)` with
//!
//! ```text
//! c_skip(t) = σ_d² / ((t − ε)² + σ_d²)
//! c_out(t)  = σ_d·(t − ε) / √(σ_d² + t²)
//! c_in(t)   = 1 / √(σ_d² + t²)
//! ```
//!
//! so `c_skip(ε) = 1` and `c_out(ε) = 0` hold exactly and `f(x, ε, c) = x`
//! without any learning.

pub mod data;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{adam_step, AdamState, ConditionalNet, NetConfig, ParamStore, Tape, Tensor, Var};
use crate::rng::normals;
use crate::rollout::karras_grid;
use crate::scalar::Scalar;

pub use data::{Batch, Dataset, DatasetKind, GaussianMixture2d, Patterns8x8, PointMass};

/// Time range and preconditioning shared by consistency and score models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t_max: f64,
    pub eps: f64,
    pub sigma_data: f64,
    pub net: NetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_max: 80.0,
            eps: 0.002,
            sigma_data: 0.5,
            net: NetConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < self.t_max && self.t_max.is_finite()) {
            return Err(contract(format!(
                "need 0 < eps < T, got eps={} T={}",
                self.eps, self.t_max
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(contract("sigma_data must be positive"));
        }
        if self.net.hidden.is_empty() {
            return Err(contract("network needs at least one hidden layer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyModel<S: Scalar = f64> {
    pub params: ParamStore<S>,
    net: ConditionalNet,
    config: ModelConfig,
}

impl<S: Scalar> ConsistencyModel<S> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, data_dim: usize, contexts: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = ConditionalNet::new(&mut params, &config.net, data_dim, contexts, rng)?;
        Ok(Self {
            params,
            net,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    pub fn contexts(&self) -> usize {
        self.net.contexts()
    }

    pub fn t_max(&self) -> S {
        S::lit(self.config.t_max)
    }

    pub fn eps(&self) -> S {
        S::lit(self.config.eps)
    }

    fn sigma_data(&self) -> S {
        S::lit(self.config.sigma_data)
    }

    pub fn c_skip(&self, t: S) -> S {
        let sd = self.sigma_data();
        let u = t - self.eps();
        sd * sd / (u * u + sd * sd)
    }

    pub fn c_out(&self, t: S) -> S {
        let sd = self.sigma_data();
        sd * (t - self.eps()) / (sd * sd + t * t).sqrt()
    }

    pub fn c_in(&self, t: S) -> S {
        let sd = self.sigma_data();
        S::one() / (sd * sd + t * t).sqrt()
    }

    fn check_time(&self, t: S) -> Result<()> {
        if !(t >= self.eps() && t <= self.t_max()) {
            return Err(Error::Domain {
                what: "t",
                value: t.as_f64(),
                lo: self.config.eps,
                hi: self.config.t_max,
            });
        }
        Ok(())
    }

    /// Records `f(x_i, t_i, c_i)` for every row using `params` (which must
    /// share this model's layout, e.g. an EMA or frozen copy).
    pub fn apply_tape_with(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        x: &Tensor<S>,
        times: &[S],
        contexts: &[usize],
    ) -> Result<Var> {
        for &t in times {
            self.check_time(t)?;
        }
        if times.len() != x.rows() {
            return Err(Error::Shape(format!("{} times for {} rows", times.len(), x.rows())));
        }
        let mut x_in = x.clone();
        for (r, &t) in times.iter().enumerate() {
            let k = self.c_in(t);
            x_in.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let f = self.net.forward_tape(tape, params, x_in, times, contexts)?;
        let skip = times.iter().map(|&t| self.c_skip(t)).collect();
        let out = times.iter().map(|&t| self.c_out(t)).collect();
        tape.affine_rows(x.clone(), skip, out, f)
    }

    pub fn apply_tape(&self, tape: &mut Tape<S>, x: &Tensor<S>, times: &[S], contexts: &[usize]) -> Result<Var> {
        self.apply_tape_with(tape, &self.params, x, times, contexts)
    }

    /// Batched evaluation with per-row times and contexts.
    pub fn apply_batch(&self, x: &Tensor<S>, times: &[S], contexts: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::no_grad();
        let v = self.apply_tape(&mut tape, x, times, contexts)?;
        Ok(tape.take_value(v))
    }

    /// `f(x, t, c)` for every row of `x`.
    pub fn apply(&self, x: &Tensor<S>, t: S, c: usize) -> Result<Tensor<S>> {
        let n = x.rows();
        self.apply_batch(x, &vec![t; n], &vec![c; n])
    }
}

/// Marginal of the variance-exploding process: `x0 + t·z`.
pub fn forward_noise<S: Scalar>(x0: &Tensor<S>, t: S, z: &Tensor<S>) -> Result<Tensor<S>> {
    x0.expect_same_shape(z, "forward_noise")?;
    Ok(Tensor::raw(
        x0.shape().to_vec(),
        x0.data().iter().zip(z.data()).map(|(&x, &e)| x + t * e).collect(),
    ))
}

/// Row-wise `x0_i + t_i·z_i`.
pub(crate) fn forward_noise_rows<S: Scalar>(x0: &Tensor<S>, times: &[S], z: &Tensor<S>) -> Tensor<S> {
    let mut out = x0.clone();
    for (r, &t) in times.iter().enumerate() {
        for (o, &e) in out.row_mut(r).iter_mut().zip(z.row(r)) {
            *o += t * e;
        }
    }
    out
}

/// `target ← decay·target + (1 − decay)·online`.
pub fn ema_update<S: Scalar>(target: &mut ParamStore<S>, online: &ParamStore<S>, decay: S) -> Result<()> {
    if !(decay >= S::zero() && decay < S::one()) {
        return Err(contract(format!("EMA decay must lie in [0, 1), got {decay}")));
    }
    target.check_layout(online)?;
    let keep = S::one() - decay;
    for (id, (_, src)) in online.ids().zip(online.iter()) {
        let dst = target.value_mut(id);
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = decay * *d + keep * s;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMetric {
    #[default]
    SquaredL2,
    PseudoHuber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtConfig {
    /// Points in the training time discretization.
    pub discretization: usize,
    pub ema_decay: f64,
    pub loss: LossMetric,
    pub huber_c: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub log_every: usize,
}

impl Default for CtConfig {
    fn default() -> Self {
        Self {
            discretization: 18,
            ema_decay: 0.95,
            loss: LossMetric::SquaredL2,
            huber_c: 0.03,
            iterations: 4000,
            batch_size: 128,
            lr: 1e-3,
            rho: 7.0,
            log_every: 100,
        }
    }
}

impl CtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.discretization < 2 {
            return Err(contract("discretization needs at least 2 points"));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(contract("EMA decay must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.log_every == 0 || !(self.lr > 0.0) {
            return Err(contract("batch size, log interval and lr must be positive"));
        }
        Ok(())
    }
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub losses: Vec<f64>,
    pub log_every: usize,
}

impl LossHistory {
    /// `(last iteration of interval, mean loss over interval)`, one entry per
    /// completed logging interval.
    pub fn logged(&self) -> Vec<(usize, f64)> {
        if self.log_every == 0 {
            return Vec::new();
        }
        self.losses
            .chunks_exact(self.log_every)
            .enumerate()
            .map(|(i, w)| ((i + 1) * self.log_every, w.iter().sum::<f64>() / w.len() as f64))
            .collect()
    }

    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let w = &self.losses[range];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Batch loss `mean_i d(online_i, target_i)` recorded on `tape`.
pub(crate) fn distance_loss<S: Scalar>(
    tape: &mut Tape<S>,
    online: Var,
    target: Tensor<S>,
    metric: LossMetric,
    huber_c: S,
) -> Result<Var> {
    let target = tape.input(target);
    let diff = tape.sub(online, target)?;
    let sq = tape.square(diff)?;
    let mut per_row = tape.sum_rows(sq)?;
    if metric == LossMetric::PseudoHuber {
        let shifted = tape.add_scalar(per_row, huber_c * huber_c)?;
        let root = tape.sqrt(shifted)?;
        per_row = tape.add_scalar(root, -huber_c)?;
    }
    tape.mean(per_row)
}

fn to_tensor<S: Scalar>(b: &Batch) -> Result<Tensor<S>> {
    Tensor::from_f64(vec![b.contexts.len(), b.dim], &b.x)
}

/// Consistency training against an EMA target network on an `N`-point
/// Karras discretization. Returns the online model and its loss history.
pub fn ct_pretrain<S: Scalar, R: Rng>(
    mut model: ConsistencyModel<S>,
    dataset: &dyn Dataset,
    cfg: &CtConfig,
    rng: &mut R,
) -> Result<(ConsistencyModel<S>, LossHistory)> {
    cfg.validate()?;
    if dataset.dim() != model.data_dim() || dataset.contexts() > model.contexts() {
        return Err(contract("dataset does not match model dimensions"));
    }
    let mut history = LossHistory {
        losses: Vec::with_capacity(cfg.iterations),
        log_every: cfg.log_every,
    };
    if cfg.iterations == 0 {
        return Ok((model, history));
    }
    // ascending t_1 = eps < … < t_N = T
    let mut grid: Vec<S> = karras_grid::<S>(cfg.discretization - 1, model.config.eps, model.config.t_max, cfg.rho)?
        .points()
        .to_vec();
    grid.reverse();
    let mut target = model.params.clone();
    let mut adam = AdamState::new(&model.params);
    let lr = S::lit(cfg.lr);
    let decay = S::lit(cfg.ema_decay);
    let huber = S::lit(cfg.huber_c);
    let b = cfg.batch_size;

    for it in 0..cfg.iterations {
        let batch = dataset.sample(rng, b);
        let x0: Tensor<S> = to_tensor(&batch)?;
        let z = Tensor::raw(x0.shape().to_vec(), normals(rng, x0.len()));
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..grid.len() - 1)).collect();
        let t_hi: Vec<S> = idx.iter().map(|&n| grid[n + 1]).collect();
        let t_lo: Vec<S> = idx.iter().map(|&n| grid[n]).collect();
        let x_hi = forward_noise_rows(&x0, &t_hi, &z);
        let x_lo = forward_noise_rows(&x0, &t_lo, &z);

        let tgt = {
            let mut tape = Tape::no_grad();
            let v = model.apply_tape_with(&mut tape, &target, &x_lo, &t_lo, &batch.contexts)?;
            tape.take_value(v)
        };
        let mut tape = Tape::new();
        let online = model.apply_tape(&mut tape, &x_hi, &t_hi, &batch.contexts)?;
        let loss = distance_loss(&mut tape, online, tgt, cfg.loss, huber)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("consistency loss at iteration {it}")));
        }
        history.losses.push(value);
        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        adam_step(&mut model.params, &mut adam, lr)?;
        ema_update(&mut target, &model.params, decay)?;
    }
    Ok((model, history))
}

/// Mean distance between `f` at adjacent discretization times along shared
/// noise, over `draws` samples. Lower means more self-consistent.
pub fn consistency_gap<S: Scalar, R: Rng>(
    model: &ConsistencyModel<S>,
    dataset: &dyn Dataset,
    discretization: usize,
    rho: f64,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut grid: Vec<S> = karras_grid::<S>(discretization - 1, model.config.eps, model.config.t_max, rho)?
        .points()
        .to_vec();
    grid.reverse();
    let batch = dataset.sample(rng, draws);
    let x0: Tensor<S> = to_tensor(&batch)?;
    let z = Tensor::raw(x0.shape().to_vec(), normals(rng, x0.len()));
    let idx: Vec<usize> = (0..draws).map(|_| rng.random_range(0..grid.len() - 1)).collect();
    let t_hi: Vec<S> = idx.iter().map(|&n| grid[n + 1]).collect();
    let t_lo: Vec<S> = idx.iter().map(|&n| grid[n]).collect();
    let a = model.apply_batch(&forward_noise_rows(&x0, &t_hi, &z), &t_hi, &batch.contexts)?;
    let b = model.apply_batch(&forward_noise_rows(&x0, &t_lo, &z), &t_lo, &batch.contexts)?;
    let total: f64 = (0..draws)
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(&p, &q)| (p - q).as_f64().powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / draws as f64)
}
