//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use ddt_core::{Gradients, OptimizerState, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One update at step `t` (1-based):
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// w ← w − lr·( m̂/(√v̂ + ε) + λw )   with m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
/// ```
///
/// Parameters without a gradient are treated as having a zero gradient.
/// Missing moment entries are created as zeros.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if t < 1 {
        return Err(HarnessError::Config("optimizer step t must be >= 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, w) in params.iter_mut() {
        let shape = w.shape().to_vec();
        let m = state
            .first
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        let v = state
            .second
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(HarnessError::Config(format!(
                "optimizer state for {name} has the wrong shape"
            )));
        }
        let g = grads.param(name);
        let (mut m, mut v) = (m.into_vec(), v.into_vec());
        for (i, wi) in w.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i].to_f64().unwrap_or(f64::NAN));
            let mi = cfg.beta1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let wf = wi.to_f64().unwrap_or(f64::NAN);
            let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + cfg.weight_decay * wf;
            *wi = T::of(wf - lr * update);
        }
        state.first.insert(name, Tensor::new(&shape, m)?);
        state.second.insert(name, Tensor::new(&shape, v)?);
    }
    state.step = t;
    Ok(())
}

/// `lr_final + ½(lr_init − lr_final)(1 + cos(πt/T))`, clamped to `lr_final`
/// once `t ≥ T`.
pub fn cosine_lr(t: u64, total: u64, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_final;
    }
    let progress = t as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}
