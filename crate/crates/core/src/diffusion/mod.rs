//! Noise-conditional denoiser on the same variance-exploding process, sampled
//! with a stochastic ancestral sampler over a long geometric grid.
//!
//! `D(x, σ, c) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x, σ, c)` with
//! `c_skip = σ_d²/(σ² + σ_d²)`, `c_out = σ·σ_d/√(σ² + σ_d²)` and
//! `c_in = 1/√(σ² + σ_d²)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{Batch, Dataset, LossHistory, ModelConfig};
use crate::error::{contract, Error, Result};
use crate::nn::{adam_step, AdamState, ConditionalNet, ParamStore, Tape, Tensor, Var};
use crate::rng::normals;
use crate::rewards::QueryCounter;
use crate::rollout::Policy;
use crate::trainer::{train, EpochMetrics, TrainConfig};
use crate::scalar::Scalar;

/// Noise levels `σ0 > σ1 > … > σH > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid<S: Scalar = f64> {
    levels: Vec<S>,
}

impl<S: Scalar> NoiseGrid<S> {
    pub fn from_levels(levels: Vec<S>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(contract("noise grid needs at least two levels"));
        }
        if levels.iter().any(|&s| !(s > S::zero() && s.is_finite())) {
            return Err(contract("noise levels must be positive and finite"));
        }
        if let Some(i) = levels.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(contract(format!(
                "noise grid must be strictly decreasing; levels {i} and {} are {} and {}",
                i + 1,
                levels[i],
                levels[i + 1]
            )));
        }
        Ok(Self { levels })
    }

    /// `σi = T·(ε/T)^{i/H}` with exact endpoints.
    pub fn geometric(h: usize, eps: f64, t_max: f64) -> Result<Self> {
        if h == 0 || !(eps > 0.0 && eps < t_max) {
            return Err(contract(format!("invalid geometric grid H={h} eps={eps} T={t_max}")));
        }
        let ratio = eps / t_max;
        let mut levels: Vec<S> = (0..=h)
            .map(|i| S::lit(t_max * ratio.powf(i as f64 / h as f64)))
            .collect();
        levels[0] = S::lit(t_max);
        levels[h] = S::lit(eps);
        Self::from_levels(levels)
    }

    pub fn horizon(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[S] {
        &self.levels
    }
}

/// Mean and std of the ancestral transition from `σi` to `σn` given the
/// denoised estimate `d`: `mean = x + (σi² − σn²)·(d − x)/σi²`,
/// `std = √(σn²(σi² − σn²)/σi²)`.
pub fn ancestral_moments<S: Scalar>(x: &[S], d: &[S], sigma_i: S, sigma_next: S) -> Result<(Vec<S>, S)> {
    if !(sigma_next < sigma_i && sigma_next >= S::zero()) {
        return Err(contract(format!(
            "ancestral step needs σ_next < σ_i, got {sigma_next} and {sigma_i}"
        )));
    }
    let (r, std) = step_coefficients(sigma_i, sigma_next);
    let keep = S::one() - r;
    Ok((x.iter().zip(d).map(|(&xv, &dv)| keep * xv + r * dv).collect(), std))
}

fn step_coefficients<S: Scalar>(sigma_i: S, sigma_next: S) -> (S, S) {
    let (si2, sn2) = (sigma_i * sigma_i, sigma_next * sigma_next);
    let r = (si2 - sn2) / si2;
    (r, (sn2 * (si2 - sn2) / si2).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel<S: Scalar = f64> {
    pub params: ParamStore<S>,
    net: ConditionalNet,
    config: ModelConfig,
    grid: NoiseGrid<S>,
}

impl<S: Scalar> ScoreModel<S> {
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        steps: usize,
        data_dim: usize,
        contexts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = NoiseGrid::geometric(steps, config.eps, config.t_max)?;
        let mut params = ParamStore::new();
        let net = ConditionalNet::new(&mut params, &config.net, data_dim, contexts, rng)?;
        Ok(Self {
            params,
            net,
            config: config.clone(),
            grid,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &NoiseGrid<S> {
        &self.grid
    }

    pub fn set_grid(&mut self, grid: NoiseGrid<S>) {
        self.grid = grid;
    }

    fn sd(&self) -> S {
        S::lit(self.config.sigma_data)
    }

    pub fn c_skip(&self, sigma: S) -> S {
        let sd = self.sd();
        sd * sd / (sigma * sigma + sd * sd)
    }

    pub fn c_out(&self, sigma: S) -> S {
        let sd = self.sd();
        sigma * sd / (sigma * sigma + sd * sd).sqrt()
    }

    pub fn c_in(&self, sigma: S) -> S {
        let sd = self.sd();
        S::one() / (sigma * sigma + sd * sd).sqrt()
    }

    /// Records `D(x_i, σ_i, c_i)` using `params`.
    pub fn denoise_tape(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        x: &Tensor<S>,
        sigmas: &[S],
        contexts: &[usize],
    ) -> Result<Var> {
        if sigmas.len() != x.rows() {
            return Err(Error::Shape(format!("{} noise levels for {} rows", sigmas.len(), x.rows())));
        }
        if let Some(&s) = sigmas.iter().find(|&&s| !(s > S::zero() && s.is_finite())) {
            return Err(Error::Domain {
                what: "sigma",
                value: s.as_f64(),
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let mut x_in = x.clone();
        for (r, &s) in sigmas.iter().enumerate() {
            let k = self.c_in(s);
            x_in.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let f = self.net.forward_tape(tape, params, x_in, sigmas, contexts)?;
        let skip = sigmas.iter().map(|&s| self.c_skip(s)).collect();
        let out = sigmas.iter().map(|&s| self.c_out(s)).collect();
        tape.affine_rows(x.clone(), skip, out, f)
    }

    pub fn denoise(&self, x: &Tensor<S>, sigma: S, c: usize) -> Result<Tensor<S>> {
        let n = x.rows();
        let mut tape = Tape::no_grad();
        let v = self.denoise_tape(&mut tape, &self.params, x, &vec![sigma; n], &vec![c; n])?;
        Ok(tape.take_value(v))
    }

    /// One ancestral transition from level `i` for every row of `x`.
    /// Returns `(next, mean, std)` with `next = mean + std·z`.
    pub fn ancestral_step(&self, x: &Tensor<S>, i: usize, c: usize, z: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, S)> {
        let h = self.grid.horizon();
        if i >= h {
            return Err(contract(format!("level {i} outside 0..{h}")));
        }
        x.expect_same_shape(z, "ancestral_step")?;
        let n = x.rows();
        let mut tape = Tape::no_grad();
        let m = self.step_means(&mut tape, &self.params, x, &vec![i; n], &vec![c; n])?;
        let mean = tape.take_value(m);
        let std = self.step_std(i);
        let next = Tensor::raw(
            mean.shape().to_vec(),
            mean.data().iter().zip(z.data()).map(|(&m, &e)| m + std * e).collect(),
        );
        Ok((next, mean, std))
    }
}

impl<S: Scalar> Policy<S> for ScoreModel<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    fn contexts(&self) -> usize {
        self.net.contexts()
    }

    fn horizon(&self) -> usize {
        self.grid.horizon()
    }

    fn step_std(&self, t: usize) -> S {
        let l = self.grid.levels();
        step_coefficients(l[t], l[t + 1]).1
    }

    fn model_calls(&self) -> usize {
        self.grid.horizon()
    }

    fn initial_scale(&self) -> S {
        self.grid.levels()[0]
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
        if let Some(&t) = steps.iter().find(|&&t| t >= h) {
            return Err(contract(format!("step {t} outside horizon {h}")));
        }
        let l = self.grid.levels();
        let sigmas: Vec<S> = steps.iter().map(|&t| l[t]).collect();
        let d = self.denoise_tape(tape, params, states, &sigmas, contexts)?;
        let r: Vec<S> = steps.iter().map(|&t| step_coefficients(l[t], l[t + 1]).0).collect();
        let keep = r.iter().map(|&r| S::one() - r).collect();
        tape.affine_rows(states.clone(), keep, r, d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 128,
            lr: 1e-3,
            log_every: 100,
        }
    }
}

/// Denoising score matching with `σ` log-uniform on `[ε, T]` and per-sample
/// weight `1/c_out(σ)²`.
pub fn dsm_pretrain<S: Scalar, R: Rng>(
    mut model: ScoreModel<S>,
    dataset: &dyn Dataset,
    cfg: &DsmConfig,
    rng: &mut R,
) -> Result<(ScoreModel<S>, LossHistory)> {
    if cfg.batch_size == 0 || cfg.log_every == 0 || !(cfg.lr > 0.0) {
        return Err(contract("batch size, log interval and lr must be positive"));
    }
    if dataset.dim() != model.data_dim() || dataset.contexts() > model.contexts() {
        return Err(contract("dataset does not match model dimensions"));
    }
    let mut history = LossHistory {
        losses: Vec::with_capacity(cfg.iterations),
        log_every: cfg.log_every,
    };
    let mut adam = AdamState::new(&model.params);
    let lr = S::lit(cfg.lr);
    let (lo, hi) = (model.config.eps.ln(), model.config.t_max.ln());
    for it in 0..cfg.iterations {
        let Batch { x, contexts, dim } = dataset.sample(rng, cfg.batch_size);
        let x0: Tensor<S> = Tensor::from_f64(vec![contexts.len(), dim], &x)?;
        let z: Vec<S> = normals(rng, x0.len());
        let sigmas: Vec<S> = (0..contexts.len()).map(|_| S::lit(rng.random_range(lo..hi).exp())).collect();
        let mut noisy = x0.clone();
        for (r, &s) in sigmas.iter().enumerate() {
            for (v, &e) in noisy.row_mut(r).iter_mut().zip(&z[r * dim..(r + 1) * dim]) {
                *v += s * e;
            }
        }
        let mut tape = Tape::new();
        let d = model.denoise_tape(&mut tape, &model.params, &noisy, &sigmas, &contexts)?;
        let target = tape.input(x0);
        let diff = tape.sub(d, target)?;
        let weights = sigmas.iter().map(|&s| S::one() / model.c_out(s)).collect();
        let weighted = tape.scale_rows(diff, weights)?;
        let sq = tape.square(weighted)?;
        let per_row = tape.sum_rows(sq)?;
        let loss = tape.mean(per_row)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("denoising loss at iteration {it}")));
        }
        history.losses.push(value);
        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        adam_step(&mut model.params, &mut adam, lr)?;
    }
    Ok((model, history))
}

/// Fine-tunes the denoiser through its `H`-step ancestral MDP with the same
/// normalization, surrogate and update as the consistency arm.
pub fn ddpo_finetune<S: Scalar>(
    mut model: ScoreModel<S>,
    reward: &QueryCounter,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&ScoreModel<S>, &EpochMetrics) -> Result<()>,
) -> Result<(ScoreModel<S>, Vec<EpochMetrics>)> {
    let metrics = train(&mut model, reward, cfg, on_epoch)?;
    Ok((model, metrics))
}
