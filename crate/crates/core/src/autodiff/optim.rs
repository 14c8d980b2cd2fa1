//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {name}: state shape {state} does not match parameter length {param}")]
    ShapeMismatch { name: String, state: usize, param: usize },
    #[error("parameter {0}: gradient missing")]
    MissingGrad(String),
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers of one parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One Adam update on a single parameter from its accumulated gradient.
pub fn adam_step(
    name: &str,
    param: &mut Tensor,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), OptimError> {
    let grad = param
        .grad
        .clone()
        .ok_or_else(|| OptimError::MissingGrad(name.to_string()))?;
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    if state.m.len() != param.len() || grad.len() != param.len() {
        return Err(OptimError::ShapeMismatch {
            name: name.to_string(),
            state: state.m.len(),
            param: param.len(),
        });
    }
    state.t += 1;
    let b1t = 1.0 - hp.beta1.powi(state.t as i32);
    let b2t = 1.0 - hp.beta2.powi(state.t as i32);
    let data = param.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        data[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Optimizer owning per-parameter state keyed by parameter name.
#[derive(Debug, Default)]
pub struct Adam {
    pub hp: AdamParams,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Self { hp, states: BTreeMap::new() }
    }

    /// Updates every named parameter in place from its `grad` buffer.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
    ) -> Result<(), OptimError> {
        for (name, param) in params {
            let state = self.states.entry(name.clone()).or_default();
            adam_step(&name, param, state, &self.hp)?;
        }
        Ok(())
    }
}
