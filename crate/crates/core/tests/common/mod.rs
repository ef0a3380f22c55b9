#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlcm_core::consistency::{ConsistencyModel, GaussianMixture2d, ModelConfig};
use rlcm_core::diffusion::ScoreModel;
use rlcm_core::nn::{Activation, NetConfig, ParamStore, Tensor};
use rlcm_core::rewards::{Reward, Target2d};
use rlcm_core::rollout::{collect, replay_logprobs, ConsistencyPolicy, Policy, Trajectory};
use rlcm_core::trainer::{accumulate_surrogate_grad, clipped_surrogate};

pub fn small_config(hidden: &[usize], activation: Activation) -> ModelConfig {
    ModelConfig {
        net: NetConfig {
            hidden: hidden.to_vec(),
            activation,
            time_freqs: 2,
            context_dim: 3,
        },
        ..ModelConfig::default()
    }
}

pub fn small_consistency(seed: u64) -> ConsistencyModel<f64> {
    let cfg = small_config(&[16, 16], Activation::Silu);
    ConsistencyModel::new(&cfg, 2, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn small_score(seed: u64, steps: usize) -> ScoreModel<f64> {
    let cfg = small_config(&[16, 16], Activation::Tanh);
    ScoreModel::new(&cfg, steps, 2, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn mixture_reward() -> Target2d {
    Target2d::for_mixture(&GaussianMixture2d::default())
}

/// Adds `scale·N(0,1)` noise to every parameter.
pub fn jitter(params: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = params.value(id);
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| v + scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let shape = t.shape().to_vec();
        params.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

fn with_coordinate(params: &ParamStore<f64>, p: usize, k: usize, v: f64) -> ParamStore<f64> {
    let mut out = params.clone();
    let id = out.ids().nth(p).unwrap();
    let t = out.value(id);
    let mut data = t.data().to_vec();
    data[k] = v;
    let shape = t.shape().to_vec();
    out.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    out
}

/// Largest per-coordinate relative error between the gradients stored in
/// `analytic` and central differences of `loss`. Coordinates whose
/// gradients are both below `floor` in magnitude compare absolutely
/// against `floor`.
pub fn max_fd_error(analytic: &ParamStore<f64>, loss: impl Fn(&ParamStore<f64>) -> f64, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (p, id) in analytic.ids().enumerate() {
        let n = analytic.value(id).len();
        for k in 0..n {
            let v = analytic.value(id).data()[k];
            let h = 1e-6 * v.abs().max(1.0);
            let up = loss(&with_coordinate(analytic, p, k, v + h));
            let down = loss(&with_coordinate(analytic, p, k, v - h));
            let numeric = (up - down) / (2.0 * h);
            let g = analytic.grad(id).data()[k];
            let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Trajectories from `policy` with random advantages in `[-2, 2]`.
pub fn scored_rollouts<P: Policy<f64>>(policy: &P, n: usize, seed: u64) -> Vec<Trajectory<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx: Vec<usize> = (0..n).map(|i| i % policy.contexts()).collect();
    let mut trajs = collect(policy, &ctx, seed, 0, n, None).unwrap();
    for t in trajs.iter_mut() {
        t.advantage = rng.random_range(-2.0..2.0);
    }
    trajs
}

/// Finite-difference check of the clipped-surrogate gradient with the live
/// parameters moved away from the rollout parameters, so ratios differ
/// from 1. Returns `(max relative error, smallest |ratio - 1|)`.
pub fn surrogate_fd<P: Policy<f64> + Clone>(mut policy: P, n: usize, eps_clip: f64, seed: u64) -> (f64, f64) {
    let trajs = scored_rollouts(&policy, n, seed);
    let old = policy.params().clone();
    jitter(policy.params_mut(), 0.003, seed + 1);
    policy.params_mut().zero_grad();
    let batch: Vec<&Trajectory<f64>> = trajs.iter().collect();
    let st = accumulate_surrogate_grad(&mut policy, &old, &batch, eps_clip, 1.0).unwrap();
    let k = trajs.len() as f64;
    let loss = |params: &ParamStore<f64>| {
        let mut total = 0.0;
        for tr in &trajs {
            let new = replay_logprobs(&policy, params, tr).unwrap();
            let old_lp = replay_logprobs(&policy, &old, tr).unwrap();
            total += clipped_surrogate(&new, &old_lp, tr.advantage, eps_clip).unwrap();
        }
        -total / k
    };
    let err = max_fd_error(policy.params(), loss, 1e-5);
    let spread = (st.ratio_max - 1.0).abs().max((st.ratio_min - 1.0).abs());
    (err, spread)
}

pub fn consistency_policy(seed: u64, h: usize) -> ConsistencyPolicy<f64> {
    ConsistencyPolicy::with_horizon(small_consistency(seed), h, 7.0).unwrap()
}

pub fn reward_box() -> Box<dyn Reward> {
    Box::new(mixture_reward())
}
