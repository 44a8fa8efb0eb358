use serde::{Deserialize, Serialize};

use super::{EngineError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for bias-corrected Adam. The learning rate is
/// supplied per step by the caller's schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), EngineError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(EngineError::Invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(EngineError::ParamShape {
            index: params.len().min(grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].len() != p.len() {
            return Err(EngineError::ParamShape { index: i });
        }
        if !g.is_finite() {
            return Err(EngineError::NonFiniteInput(format!("gradient tensor {i}")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
