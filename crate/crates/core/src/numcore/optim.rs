//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use super::params::ParamTree;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub m: ParamTree<T>,
    pub v: ParamTree<T>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &ParamTree<T>) -> Self {
        AdamWState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update in place. Moments are bias-corrected; the decay term
/// `lr * weight_decay * p` is applied to the weights and never enters the
/// moments.
pub fn adamw_step<T: Real>(
    params: &mut ParamTree<T>,
    grads: &ParamTree<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("no gradient for parameter {name}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("no optimizer state for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Consistency(format!("shape mismatch for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_init` at step 0 down to `lr_min` at
/// `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
