//! Adam with decoupled weight decay, learning-rate schedule, and per-example
//! gradient clipping.

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Peak learning rate after warmup.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub max_per_example_grad_norm: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 2e-4,
            weight_decay: 0.0,
            max_per_example_grad_norm: 1.0,
            warmup_steps: 500,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::config("need 0 < beta1 < beta2 < 1"));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("learning rate must be non-negative"));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 || self.max_per_example_grad_norm <= 0.0 {
            return Err(Error::config(
                "epsilon, weight decay or clip norm out of range",
            ));
        }
        Ok(())
    }
}

/// Parameters whose name marks them as layer-norm gain/bias skip weight decay.
pub fn decays(name: &str) -> bool {
    !(name.contains(".ln") && (name.ends_with(".gain") || name.ends_with(".bias")))
}

/// First/second moments keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `lr` maps a parameter name to its rate,
/// which is how the image and text encoders get different learning rates.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    params.check_same_keys(grads)?;
    params.check_same_keys(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((name, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments)
    {
        let rate = lr(name);
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= rate * (mhat / (vhat.sqrt() + cfg.epsilon) + wd * pd[i]);
        }
    }
    Ok(())
}

/// Plain gradient descent `p -= lr(name) * g`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    lr: impl Fn(&str) -> f64,
) -> Result<()> {
    params.check_same_keys(grads)?;
    for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        p.add_scaled(g, -lr(name));
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_steps: usize,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    let step = step.min(total_steps);
    let warmup = warmup_steps.min(total_steps);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(if step < total_steps { base_lr } else { 0.0 });
    }
    let t = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Clips each example's gradient to global norm `max_norm`, then averages.
pub fn per_example_clip(per_example: &[ParamStore], max_norm: f64) -> Result<ParamStore> {
    let first = per_example
        .first()
        .ok_or(Error::Empty("per-example gradients"))?;
    let mut acc = first.zeros_like();
    let inv_n = 1.0 / per_example.len() as f64;
    for g in per_example {
        let norm = g.global_norm();
        let s = if norm > max_norm {
            max_norm / norm
        } else {
            1.0
        };
        acc.add_scaled(g, s * inv_n)?;
    }
    Ok(acc)
}

/// Mean of the gradients without clipping.
pub fn mean_grads(per_example: &[ParamStore]) -> Result<ParamStore> {
    let first = per_example
        .first()
        .ok_or(Error::Empty("per-example gradients"))?;
    let mut acc = first.zeros_like();
    let inv_n = 1.0 / per_example.len() as f64;
    for g in per_example {
        acc.add_scaled(g, inv_n)?;
    }
    Ok(acc)
}

/// Rescales the whole store so its global norm is at most `max_norm`.
pub fn clip_global(grads: &mut ParamStore, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm {
        grads.scale_in_place(max_norm / n);
    }
}
