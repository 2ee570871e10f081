use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for each parameter block of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// per-block multipliers of the learning rate, in [`Model::blocks_mut`] order
    pub lr_scale: [f64; 7],
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &mut Model, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.blocks_mut().iter().map(|(_, b)| b.len()).collect();
        Self {
            config,
            step: 0,
            lr_scale: [1.0; 7],
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of a single block. `step` is the 1-based
/// step number after incrementing.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every block. Non-finite gradients are rejected
/// before any parameter changes.
pub fn adam_step(model: &mut Model, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let blocks = grads.blocks();
    for (name, g) in &blocks {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let cfg = state.config;
    for (b, (name, params)) in model.blocks_mut().into_iter().enumerate() {
        let g = blocks[b].1;
        if g.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{name}: gradient has {} entries, parameters {}",
                g.len(),
                params.len()
            )));
        }
        let lr = lr * state.lr_scale[b];
        adam_update(params, g, &mut state.first[b], &mut state.second[b], state.step, lr, &cfg);
    }
    Ok(())
}

/// Constant learning rate followed by cosine annealing to `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub const_epochs: usize,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { lr0: 5e-4, lr_min: 0.0, const_epochs: 20, total_epochs: 40 }
    }
}

/// Learning rate for a 0-based epoch: `lr0` for the first `const_epochs`,
/// then a half cosine reaching `lr_min` at the final epoch.
pub fn lr_schedule(epoch: usize, s: &Schedule) -> Result<f64> {
    if epoch >= s.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            s.total_epochs
        )));
    }
    if epoch < s.const_epochs {
        return Ok(s.lr0);
    }
    let span = s.total_epochs - 1 - s.const_epochs;
    if span == 0 {
        return Ok(s.lr_min);
    }
    let progress = (epoch - s.const_epochs) as f64 / span as f64;
    Ok(s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
