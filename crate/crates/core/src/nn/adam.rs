use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{Result, VmgError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Mlp,
    pub second_moment: Mlp,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &Mlp, config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(VmgError::invalid("learning rate must be > 0"));
        }
        Ok(AdamState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            config,
        })
    }
}

/// One bias-corrected Adam update. Gradients are scanned for NaN before any
/// parameter is touched, so a failed step leaves `params` and `state` intact.
pub fn adam_step(params: &mut Mlp, grads: &Mlp, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(VmgError::invalid("adam: parameter and gradient shapes differ"));
    }
    for (name, g) in grads.groups() {
        if g.iter().any(|v| v.is_nan()) {
            return Err(VmgError::NumericFault {
                location: name,
                detail: "NaN gradient".into(),
            });
        }
    }

    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let grad_groups = grads.groups();
    let mut m_groups = state.first_moment.groups_mut();
    let mut v_groups = state.second_moment.groups_mut();
    for (gi, (_, p)) in params.groups_mut().into_iter().enumerate() {
        let g = grad_groups[gi].1;
        let m = &mut *m_groups[gi].1;
        let v = &mut *v_groups[gi].1;
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
