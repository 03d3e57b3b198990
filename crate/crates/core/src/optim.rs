//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use std::f64::consts::PI;

use crate::encoder::ParamStore;
use crate::error::{Error, NonFinite, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Learning rate at step `step` (0-based): linear ramp to `base` over
/// `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(
                "optimizer state does not match the parameters".into(),
            ))
        }
    }
}

/// One AdamW update at learning rate `lr`. Gradients are in store order;
/// decay applies only to parameters flagged for it.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(NonFinite {
                what: format!("gradient of {}", p.name),
                step: Some(state.step),
                batch_indices: Vec::new(),
            }));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .params_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        let (pd, gd) = (p.value.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= decay * pd[i] + lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
