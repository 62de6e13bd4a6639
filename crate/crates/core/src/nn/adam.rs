//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DenseNet, NetGrads};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid(format!(
                "betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        })
    }

    /// One update in place. Rejects non-finite gradients rather than
    /// corrupting the moment estimates.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Scales `grads` in place so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Clips, then applies one Adam step to the network's parameters. Returns
/// the pre-clip gradient norm.
pub fn adam_update(
    net: &mut DenseNet,
    state: &mut AdamState,
    grads: &NetGrads,
    clip: Option<f64>,
) -> Result<f64> {
    let mut g = grads.flat();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient passed to optimizer".into()));
    }
    let norm = match clip {
        Some(max) => clip_global_norm(&mut g, max),
        None => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
    };
    let mut params = net.params_flat();
    state.apply(&mut params, &g)?;
    net.set_params_flat(&params)?;
    Ok(norm)
}
