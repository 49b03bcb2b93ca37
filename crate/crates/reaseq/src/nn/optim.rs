//! Adam with bias correction and a warmup-then-cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::store::{Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor of the cosine decay, as a fraction of the base rate.
    pub min_lr_fraction: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
            total_steps: 1000,
            min_lr_fraction: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::config("total_steps must be >= warmup_steps"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config("min_lr_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Learning rate at a step: linear ramp 0 -> base over `warmup_steps`, then
/// cosine decay from base to `min_lr_fraction * base` at `total_steps`,
/// clamped at the floor afterwards.
pub fn lr_schedule(step: u64, cfg: &OptimConfig) -> f32 {
    let base = cfg.learning_rate;
    let floor = cfg.min_lr_fraction * base;
    if step < cfg.warmup_steps {
        return base * step as f32 / cfg.warmup_steps as f32;
    }
    if step == cfg.warmup_steps {
        return base;
    }
    if step >= cfg.total_steps {
        return floor;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    floor + (base - floor) * cos as f32
}

/// One Adam update over every named gradient.
///
/// Parameters without a gradient entry are untouched. An all-zero gradient
/// decays that parameter's moments but never moves its value, so sparse
/// updates (embedding rows, codebooks) don't drift.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, cfg: &OptimConfig, step: u64) -> Result<()> {
    cfg.validate()?;
    let lr = lr_schedule(step, cfg);
    for (name, grad) in grads {
        let param = params.get_mut(name)?;
        if param.value.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for '{name}' has shape {:?}, parameter is {:?}",
                grad.shape(),
                param.value.shape()
            )));
        }
        param.step += 1;
        let all_zero = grad.data().iter().all(|&g| g == 0.0);
        if all_zero {
            if let Some(m) = &mut param.m {
                m.scale_assign(cfg.beta1);
            }
            if let Some(v) = &mut param.v {
                v.scale_assign(cfg.beta2);
            }
            continue;
        }
        if param.m.is_none() {
            param.m = Some(crate::nn::tensor::Tensor::zeros(grad.shape().to_vec()));
            param.v = Some(crate::nn::tensor::Tensor::zeros(grad.shape().to_vec()));
        }
        let t = param.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let m = param.m.as_mut().unwrap().data_mut();
        let v = param.v.as_mut().unwrap().data_mut();
        let theta = param.value.data_mut();
        for i in 0..theta.len() {
            let g = grad.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        param.value.ensure_finite(name)?;
    }
    Ok(())
}
