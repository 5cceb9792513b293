//! Adam with decoupled weight decay.
//!
//! Decay is applied directly to the parameter (never through the moment
//! estimates) so it can be switched off per tensor: linear weights decay,
//! shape parameters and LayerNorm affines never do.

use super::AutogradError;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled L2 coefficient; 0 disables decay.
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update in place. Rejects non-finite gradients: a NaN or Inf
/// gradient is a stability signal the caller records, not something to
/// silently propagate into the parameters.
pub fn adam_step(
    value: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), AutogradError> {
    assert_eq!(value.len(), grad.len());
    assert_eq!(value.len(), state.m.len());
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(AutogradError::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..value.len() {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        let decay = hyper.weight_decay * value[i];
        value[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + decay);
    }
    Ok(())
}
