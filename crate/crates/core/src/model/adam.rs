use super::{GradBundle, ModelBundle};
use crate::error::{Error, Result};

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &ModelBundle) -> Self {
        Self::with_hyperparameters(model, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(model: &ModelBundle, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected Adam update. Tensors masked as frozen are skipped.
pub fn adam_step(state: &mut AdamState, model: &mut ModelBundle, grads: &GradBundle, lr: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.first.len()
        || grad_tensors.iter().zip(&state.first).any(|(g, m)| g.len() != m.len())
    {
        return Err(Error::Shape("gradient tensors do not match optimizer state".into()));
    }
    if let Some(bad) = grad_tensors.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient(bad));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - state.beta1.powi(t);
    let correction2 = 1.0 - state.beta2.powi(t);
    let mask = model.trainable_mask();
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (idx, param) in model.tensors_mut().into_iter().enumerate() {
        if !mask[idx] {
            continue;
        }
        let g = grad_tensors[idx];
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
