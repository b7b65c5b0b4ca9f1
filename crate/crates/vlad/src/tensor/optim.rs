//! Adam optimizer state and the cosine learning-rate schedule.

use super::Scalar;
use crate::error::TensorError;

/// Adam hyperparameters. The defaults are the standard ones; weight decay is
/// intentionally absent (training uses none).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam state: first and second moment estimates plus a step
/// counter. Moments are kept in f64 regardless of the training scalar so the
/// bias correction stays accurate for long runs.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(numel: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update with bias correction. Only trainable parameters
/// ever reach this function; frozen tensors are never passed in.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let p = params[i].as_f64() - lr * m_hat / (v_hat.sqrt() + eps);
        params[i] = T::from_f64(p);
    }
    Ok(())
}

/// Cosine decay from `base_lr` at step 0 down to 10% of `base_lr` at
/// `total_steps`, i.e. `base_lr · (0.1 + 0.9·½(1 + cos(π·step/total)))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(
        step <= total_steps,
        "cosine_lr: step {step} out of range (total {total_steps})"
    );
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step as f64 / total_steps as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base_lr * (0.1 + 0.9 * cosine)
}
