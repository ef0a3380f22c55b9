use crate::error::{contract, Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Bias-corrected Adam moments for one [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        Self::with_betas(params, S::lit(0.9), S::lit(0.999), S::lit(1e-8))
    }

    pub fn with_betas(params: &ParamStore<S>, beta1: S, beta2: S, eps: S) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently stored in `params`.
pub fn adam_step<S: Scalar>(params: &mut ParamStore<S>, state: &mut AdamState<S>, lr: S) -> Result<()> {
    if !(lr > S::zero()) {
        return Err(contract(format!("learning rate must be positive, got {lr}")));
    }
    let (b1, b2) = (state.beta1, state.beta2);
    if !(b1 > S::zero() && b1 < S::one() && b2 > S::zero() && b2 < S::one()) {
        return Err(contract("Adam betas must lie in (0, 1)"));
    }
    if state.m.len() != params.len() {
        return Err(contract("Adam state does not match the parameter layout"));
    }
    for (name, _, grad) in params.entries_mut() {
        if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at element {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let eps = state.eps;
    for (k, (_, value, grad)) in params.entries_mut().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (S::one() - b1) * g;
            *vi = b2 * *vi + (S::one() - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when already within bounds).
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: S) -> Result<S> {
    if !(max_norm > S::zero()) {
        return Err(contract("max_norm must be positive"));
    }
    let norm = params.grad_norm();
    if norm <= max_norm {
        return Ok(S::one());
    }
    let factor = max_norm / norm;
    for (_, _, grad) in params.entries_mut() {
        grad.data_mut().iter_mut().for_each(|g| *g *= factor);
    }
    Ok(factor)
}
