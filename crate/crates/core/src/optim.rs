//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{CoralError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their joint L2 norm is at most this.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

/// First and second moments, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|t| t.zeros_like()).collect(),
            v: params.iter().map(|t| t.zeros_like()).collect(),
        }
    }
}

pub fn global_norm(grads: &[&Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One update. Returns the gradient norm before clipping.
pub fn adam_step(
    config: &AdamConfig,
    state: &mut AdamState,
    params: Vec<&mut Tensor>,
    grads: &[&Tensor],
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoralError::DimensionMismatch {
            what: "optimizer tensor count",
            expected: state.m.len(),
            got: params.len().min(grads.len()),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape != g.shape {
            return Err(CoralError::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape, g.shape
            )));
        }
    }
    let norm = global_norm(grads);
    let scale = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data
            .iter_mut()
            .zip(&g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            let gv = gv * scale;
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            *pv -= config.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + config.eps);
        }
    }
    Ok(norm)
}
