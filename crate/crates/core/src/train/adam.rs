//! Adam parameter updates with bias correction and optional decoupled
//! weight decay.

use std::collections::BTreeMap;

use super::{TrainConfig, TrainError};
use crate::model::ModelParams;
use crate::tensor::NamedTensors;

/// First and second moment estimates mirroring the parameter shapes,
/// plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0f32; t.len()]))
            .collect::<BTreeMap<_, _>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.v
    }
}

/// One optimizer step:
/// `t ← t+1; m ← β₁m + (1−β₁)g; v ← β₂v + (1−β₂)g²;`
/// `θ ← θ − α·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
/// When `weight_decay > 0`, decoupled decay `θ ← θ − α·λ·θ` is applied
/// before the Adam update.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &NamedTensors<f32>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let beta1 = cfg.beta1 as f32;
    let beta2 = cfg.beta2 as f32;
    let lr = cfg.learning_rate as f32;
    let eps = cfg.adam_eps as f32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let decay = (cfg.weight_decay > 0.0).then_some(lr * cfg.weight_decay as f32);

    for (name, tensor) in params.tensors_mut().iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("no gradient for parameter '{name}'")))?;
        if grad.shape() != tensor.shape() {
            return Err(TrainError::Config(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                grad.shape(),
                tensor.shape()
            )));
        }
        let m = state.m.get_mut(name).expect("state mirrors parameters");
        let v = state.v.get_mut(name).expect("state mirrors parameters");
        let theta = tensor.values_mut();
        let g = grad.values();
        for i in 0..theta.len() {
            if let Some(d) = decay {
                theta[i] -= d * theta[i];
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
