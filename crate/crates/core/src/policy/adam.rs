use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamCfg {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamCfg,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: AdamCfg, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// Rejects non-finite gradients before touching any state.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &[f64],
    state: &mut OptimizerState,
) -> Result<()> {
    if grad.len() != params.values.len()
        || state.m.len() != grad.len()
        || state.v.len() != grad.len()
    {
        return Err(LabError::Contract(format!(
            "optimizer shapes: params {}, grad {}, moments {}/{}",
            params.values.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite(format!(
            "gradient entry {i} is {} at optimizer step {}",
            grad[i], state.step
        )));
    }
    let AdamCfg {
        lr,
        beta1,
        beta2,
        eps,
    } = state.cfg;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .values
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.version += 1;
    Ok(())
}
