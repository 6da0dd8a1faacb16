//! Learning-rate schedule, gradient clipping and Adam with decoupled weight
//! decay.

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::model::ParamStore;

/// Linear warm-up from 0 to `peak` over `warmup` steps, then linear decay
/// to 0 at `total`. Update number `k` (1-based) uses `lr_schedule(k, ..)`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return if total == warmup && step == warmup { peak } else { 0.0 };
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn from_config(c: &Config) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }
}

/// Gradients parallel to a [`ParamStore`]; `None` for parameters the loss
/// did not reach.
pub type Grads = Vec<Option<Vec<f32>>>;

pub fn global_norm(grads: &[Option<Vec<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for x in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *x *= s;
        }
    }
    norm
}

/// One bias-corrected Adam step. Parameters without a gradient are left
/// untouched; weight decay applies only where `decay` is set.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(SlmError::contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.numel() {
                return Err(SlmError::contract(format!("gradient of {} has the wrong size", p.name)));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(SlmError::Abort(format!(
                    "non-finite gradient {} at {}[{i}] (update {})",
                    g[i],
                    p.name,
                    state.t + 1
                )));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = f64::from(g[j]);
            let mj = cfg.beta1 * f64::from(m[j]) + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * f64::from(v[j]) + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + decay * f64::from(*w);
            *w = (f64::from(*w) - lr * step) as f32;
        }
    }
    Ok(())
}
