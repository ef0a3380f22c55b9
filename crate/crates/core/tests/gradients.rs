mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlcm_core::consistency::ConsistencyModel;
use rlcm_core::nn::{mlp_forward, Activation, Mlp, ParamStore, Tape, Tensor};
use rlcm_core::rollout::Policy;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// `mean_i ||mlp(x_i) - y_i||²` on a fresh tape.
fn mlp_loss(net: &Mlp, params: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>, grad: bool) -> (Tape<f64>, rlcm_core::nn::Var) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let input = tape.input(x.clone());
    let out = net.forward_tape(&mut tape, params, input).unwrap();
    let target = tape.input(y.clone());
    let d = tape.sub(out, target).unwrap();
    let sq = tape.square(d).unwrap();
    let rows = tape.sum_rows(sq).unwrap();
    let loss = tape.mean(rows).unwrap();
    (tape, loss)
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let depth = 1 + case % 3;
        let mut widths = vec![rng.random_range(1..5)];
        for _ in 0..depth {
            widths.push(rng.random_range(1..7));
        }
        let act = if case % 2 == 0 { Activation::Tanh } else { Activation::Silu };
        let mut params = ParamStore::new();
        let net = Mlp::new(&mut params, "m", &widths, act, &mut rng).unwrap();
        // nonzero biases so every coordinate is exercised
        jitter(&mut params, 0.1, case as u64);
        let x = random_tensor(&mut rng, 5, widths[0]);
        let y = random_tensor(&mut rng, 5, *widths.last().unwrap());
        let (tape, loss) = mlp_loss(&net, &params, &x, &y, true);
        tape.backward(loss, &mut params).unwrap();
        let err = max_fd_error(
            &params,
            |p| {
                let (t, l) = mlp_loss(&net, p, &x, &y, false);
                t.value(l).data()[0]
            },
            1e-5,
        );
        assert!(err <= 1e-4, "case {case} widths {widths:?}: relative error {err:e}");
    }
}

#[test]
fn two_eight_one_network_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    let net = Mlp::new(&mut params, "m", &[2, 8, 1], Activation::Tanh, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 7, 2);
    let y = random_tensor(&mut rng, 7, 1);
    let (tape, loss) = mlp_loss(&net, &params, &x, &y, true);
    tape.backward(loss, &mut params).unwrap();
    let err = max_fd_error(
        &params,
        |p| {
            let (t, l) = mlp_loss(&net, p, &x, &y, false);
            t.value(l).data()[0]
        },
        1e-5,
    );
    assert!(err <= 1e-4, "relative error {err:e}");
}

#[test]
fn forward_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamStore::new();
    let net = Mlp::new(&mut params, "m", &[2, 16, 2], Activation::Tanh, &mut rng).unwrap();
    jitter(&mut params, 0.2, 1);
    let x = random_tensor(&mut rng, 4, 2);
    let got = mlp_forward(&net, &params, &x, &Tensor::zeros(&[4, 0]), &Tensor::zeros(&[4, 0])).unwrap();
    let (w0, b0) = net.layer_params(0);
    let (w1, b1) = net.layer_params(1);
    let (w0, b0, w1, b1) = (params.value(w0), params.value(b0), params.value(w1), params.value(b1));
    for r in 0..4 {
        let h: Vec<f64> = (0..16)
            .map(|j| {
                let z = b0.data()[j] + (0..2).map(|i| x.row(r)[i] * w0.data()[i * 16 + j]).sum::<f64>();
                z.tanh()
            })
            .collect();
        for k in 0..2 {
            let out = b1.data()[k] + (0..16).map(|j| h[j] * w1.data()[j * 2 + k]).sum::<f64>();
            assert!((got.row(r)[k] - out).abs() <= 1e-12);
        }
    }
}

fn consistency_loss(
    m: &ConsistencyModel<f64>,
    params: &ParamStore<f64>,
    x: &Tensor<f64>,
    times: &[f64],
    ctx: &[usize],
    target: &Tensor<f64>,
    grad: bool,
) -> (Tape<f64>, rlcm_core::nn::Var) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let out = m.apply_tape_with(&mut tape, params, x, times, ctx).unwrap();
    let t = tape.input(target.clone());
    let d = tape.sub(out, t).unwrap();
    let sq = tape.square(d).unwrap();
    let rows = tape.sum_rows(sq).unwrap();
    // pseudo-Huber with c = 0.03
    let shifted = tape.add_scalar(rows, 0.03 * 0.03).unwrap();
    let root = tape.sqrt(shifted).unwrap();
    let ph = tape.add_scalar(root, -0.03).unwrap();
    let loss = tape.mean(ph).unwrap();
    (tape, loss)
}

#[test]
fn consistency_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..4u64 {
        let mut m = small_consistency(case);
        jitter(&mut m.params, 0.05, case + 100);
        let x = random_tensor(&mut rng, 6, 2);
        let target = random_tensor(&mut rng, 6, 2);
        let times: Vec<f64> = (0..6).map(|_| rng.random_range(0.01f64..5.0)).collect();
        let ctx: Vec<usize> = (0..6).map(|i| i % 4).collect();
        let mut params = m.params.clone();
        let (tape, loss) = consistency_loss(&m, &params, &x, &times, &ctx, &target, true);
        tape.backward(loss, &mut params).unwrap();
        let err = max_fd_error(
            &params,
            |p| {
                let (t, l) = consistency_loss(&m, p, &x, &times, &ctx, &target, false);
                t.value(l).data()[0]
            },
            1e-5,
        );
        assert!(err <= 1e-4, "case {case}: relative error {err:e}");
    }
}

#[test]
fn surrogate_gradients_with_moved_ratios() {
    for seed in 0..4u64 {
        let eps = if seed % 2 == 0 { 0.2 } else { 1e-4 };
        let (err, spread) = surrogate_fd(consistency_policy(seed, 4), 3, eps, seed);
        assert!(spread > 1e-6, "ratios did not move");
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
    for seed in 0..2u64 {
        let m = small_score(seed, 4);
        assert_eq!(m.stochastic_steps(), 4);
        let (err, spread) = surrogate_fd(m, 2, 0.2, seed + 10);
        assert!(spread > 1e-6);
        assert!(err <= 1e-4, "diffusion seed {seed}: relative error {err:e}");
    }
}
