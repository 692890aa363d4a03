use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{config_err, Error, Result};

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.base_lr * step as f64 / warmup as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(warmup);
        if decay_steps == 0 {
            return self.base_lr;
        }
        let progress = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
        (0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(config_err("warmup fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and a warmup-cosine schedule.
///
/// Moment buffers are indexed by the position of each parameter in the slice
/// handed to [`AdamW::step`], so callers must pass parameters in a stable
/// order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: LrSchedule {
                base_lr: config.lr,
                warmup_fraction: config.warmup_fraction,
                total_steps,
            },
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one update to every trainable parameter and clears gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(config_err(format!(
                "optimizer was built for {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.trainable() && p.grad().is_none()) {
            return Err(Error::MissingGradient(i));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}
