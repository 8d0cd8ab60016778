//! Adam, SGD with momentum, weight clipping and step learning-rate decay.

use std::collections::BTreeMap;

use super::{AutodiffError, Tensor};
use crate::params::{GradMap, Params};

/// Optimizer hyperparameters.
///
/// Defaults follow the reference training setup: learning rate 0.0007,
/// `beta1 = 0.95`, `beta2 = 0.99`, `epsilon = 1e-8`, momentum 0.9, decay every
/// ten epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub clip_bound: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            lr: 0.0007,
            beta1: 0.95,
            beta2: 0.99,
            epsilon: 1e-8,
            momentum: 0.9,
            clip_bound: 1.0,
            decay_factor: 0.9,
            decay_interval: 10,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<(), AutodiffError> {
        let bad = |detail: String| AutodiffError::InvalidArgument { op: "optimizer", detail };
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(bad(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(bad(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(bad(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.clip_bound.is_nan() || self.clip_bound <= 0.0 {
            return Err(bad(format!("clip bound must be positive, got {}", self.clip_bound)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(bad(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_interval == 0 {
            return Err(bad("decay interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

fn target<'a>(params: &'a mut Params, name: &str, grad: &Tensor) -> Result<&'a mut Tensor, AutodiffError> {
    let p = params.get_mut(name).ok_or_else(|| AutodiffError::InvalidArgument {
        op: "optimizer",
        detail: format!("gradient for unknown parameter {name}"),
    })?;
    if p.shape() != grad.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "optimizer",
            lhs: p.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    Ok(p)
}

fn buffer<'a>(map: &'a mut BTreeMap<String, Vec<f64>>, name: &str, len: usize) -> Result<&'a mut Vec<f64>, AutodiffError> {
    let buf = map.entry(name.to_string()).or_insert_with(|| vec![0.0; len]);
    if buf.len() != len {
        return Err(AutodiffError::ShapeMismatch {
            op: "optimizer",
            lhs: vec![buf.len()],
            rhs: vec![len],
        });
    }
    Ok(buf)
}

/// Bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(params: &mut Params, grads: &GradMap, state: &mut OptimizerState, hyper: &OptimizerHyper, lr: f64) -> Result<(), AutodiffError> {
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - hyper.beta1.powi(t);
    let correct2 = 1.0 - hyper.beta2.powi(t);
    for (name, grad) in grads {
        let p = target(params, name, grad)?;
        let m = buffer(&mut state.first, name, grad.numel())?;
        for (mv, g) in m.iter_mut().zip(grad.data()) {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * g;
        }
        let v = buffer(&mut state.second, name, grad.numel())?;
        for (vv, g) in v.iter_mut().zip(grad.data()) {
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * g * g;
        }
        let (m, v) = (&state.first[name], &state.second[name]);
        for ((w, mv), vv) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mv / correct1;
            let v_hat = vv / correct2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut Params,
    grads: &GradMap,
    state: &mut OptimizerState,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<(), AutodiffError> {
    state.step += 1;
    for (name, grad) in grads {
        let p = target(params, name, grad)?;
        let vel = buffer(&mut state.velocity, name, grad.numel())?;
        for ((w, v), g) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
            *v = hyper.momentum * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Clamps every weight of the named parameters into `[-bound, bound]`.
pub fn clip_weights<'a>(params: &mut Params, names: impl IntoIterator<Item = &'a str>, bound: f64) -> Result<(), AutodiffError> {
    if bound.is_nan() || bound <= 0.0 {
        return Err(AutodiffError::InvalidArgument {
            op: "clip_weights",
            detail: format!("bound must be positive, got {bound}"),
        });
    }
    for name in names {
        if let Some(p) = params.get_mut(name) {
            p.data_mut().iter_mut().for_each(|w| *w = w.clamp(-bound, bound));
        }
    }
    Ok(())
}

/// `base * gamma^floor(epoch / interval)`.
pub fn decayed_lr(base: f64, epoch: usize, gamma: f64, interval: usize) -> f64 {
    base * gamma.powi((epoch / interval.max(1)) as i32)
}
