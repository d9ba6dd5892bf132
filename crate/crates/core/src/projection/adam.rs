use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::ProjectionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `weights` in place.
pub fn adam_step(
    state: &mut AdamState,
    weights: &mut Array2<f64>,
    grad: &Array2<f64>,
) -> Result<(), ProjectionError> {
    if weights.dim() != grad.dim() {
        return Err(ProjectionError::ShapeMismatch(weights.dim(), grad.dim()));
    }
    if state.m.dim() != weights.dim() {
        return Err(ProjectionError::ShapeMismatch(state.m.dim(), weights.dim()));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - beta1.powf(t);
    let bias2 = 1.0 - beta2.powf(t);
    Zip::from(&mut *weights)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|w, m, v, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    Ok(())
}
