//! AdamW with decoupled weight decay, plus the warmup/cosine learning-rate
//! schedule and global-norm gradient clipping used by the training loop.

use std::collections::HashMap;

use crate::encoders::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Temperature floor: the logit scale is capped so tau never drops below this.
pub const TAU_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct ParamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl ParamState {
    pub fn new(numel: usize) -> Self {
        ParamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

/// One AdamW update on a single parameter, in place. Decoupled decay first
/// (`p -= lr * wd * p`), then the bias-corrected Adam term. The gradient is
/// read from the tensor's accumulator and left untouched.
pub fn adamw_step(
    param: &mut Tensor,
    state: &mut ParamState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let numel = param.numel();
    if state.m.len() != numel {
        return Err(Error::dim("adamw_step", param.shape(), &[state.m.len()]));
    }
    let grad = param
        .grad()
        .ok_or_else(|| Error::Config("adamw_step on a parameter without gradient".to_string()))?
        .to_vec();
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let data = param.data_mut();
    for i in 0..numel {
        data[i] -= lr * weight_decay * data[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer over a whole model: per-parameter moment state keyed by name.
/// Weight decay applies to matrices (rank >= 2) only; vectors (layer-norm
/// affines, lambda vectors) and scalars are not decayed.
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub weight_decay: f64,
    states: HashMap<String, ParamState>,
}

impl AdamW {
    pub fn new(weights: &ModelWeights, weight_decay: f64, cfg: AdamWConfig) -> Self {
        let states = weights
            .iter()
            .map(|(name, t)| (name.to_string(), ParamState::new(t.numel())))
            .collect();
        AdamW {
            cfg,
            weight_decay,
            states,
        }
    }

    /// Apply one update to every parameter from its accumulated gradient,
    /// then zero the accumulators. Clamps the logit scale so tau >= TAU_MIN.
    pub fn step(&mut self, weights: &mut ModelWeights, lr: f64) -> Result<()> {
        let wd = self.weight_decay;
        for (name, t) in weights.iter_mut() {
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no optimizer state for {name}")))?;
            let decay = if t.rank() >= 2 { wd } else { 0.0 };
            adamw_step(t, state, lr, decay, &self.cfg)?;
            t.zero_grad();
        }
        if let Some(ls) = weights.get_mut("logit_scale") {
            // tau = exp(-logit_scale); tau >= TAU_MIN caps the scale.
            let cap = (1.0 / TAU_MIN).ln();
            if ls.data()[0] > cap {
                ls.data_mut()[0] = cap;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over the first `warmup_steps`, then cosine decay
/// to zero across the rest.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Scale all gradient accumulators so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(weights: &mut ModelWeights, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, t) in weights.iter() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in weights.iter_mut() {
            let numel = t.numel();
            if t.grad().is_some() {
                let mut g = t.grad().unwrap().to_vec();
                for v in g.iter_mut() {
                    *v *= scale;
                }
                t.zero_grad();
                debug_assert_eq!(g.len(), numel);
                t.accumulate_grad(&g);
            }
        }
    }
    norm
}
