//! Step learning-rate schedule with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
    /// 1-indexed epochs at whose first iteration the rate drops.
    pub step_epochs: Vec<u32>,
    pub gamma: f64,
    /// Explicit rate after each drop. When absent the rate after `k` drops
    /// is `base_lr * gamma^k`.
    pub step_lrs: Option<Vec<f64>>,
    pub iters_per_epoch: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            warmup_iters: 500,
            warmup_start_factor: 1.0 / 3.0,
            step_epochs: vec![8, 11],
            gamma: 0.1,
            step_lrs: Some(vec![0.0005, 0.0001]),
            iters_per_epoch: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1)"));
        }
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(Error::invalid("warmup_start_factor must lie in (0, 1]"));
        }
        if self.iters_per_epoch == 0 {
            return Err(Error::invalid("iters_per_epoch must be at least 1"));
        }
        if self.step_epochs.first() == Some(&0) || self.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("step_epochs must be positive and strictly increasing"));
        }
        if let Some(lrs) = &self.step_lrs {
            if lrs.len() != self.step_epochs.len() {
                return Err(Error::invalid("step_lrs needs one rate per step epoch"));
            }
            let mut prev = self.base_lr;
            for &lr in lrs {
                if !(lr > 0.0 && lr <= prev) {
                    return Err(Error::invalid("step_lrs must be positive and non-increasing"));
                }
                prev = lr;
            }
        }
        Ok(())
    }

    /// 1-indexed epoch containing `iter`.
    pub fn epoch_of(&self, iter: u64) -> u64 {
        iter / self.iters_per_epoch + 1
    }

    /// Number of drops that have taken effect at `iter`.
    pub fn drops_at(&self, iter: u64) -> usize {
        let epoch = self.epoch_of(iter);
        self.step_epochs.iter().filter(|&&s| epoch >= u64::from(s)).count()
    }
}

/// Learning rate at iteration `iter` (0-based).
pub fn lr_at(iter: u64, cfg: &ScheduleConfig) -> f64 {
    let k = cfg.drops_at(iter);
    let lr = match (&cfg.step_lrs, k) {
        (_, 0) => cfg.base_lr,
        (Some(lrs), k) => lrs[k - 1],
        (None, k) => cfg.base_lr * cfg.gamma.powi(k as i32),
    };
    if iter < cfg.warmup_iters {
        let t = iter as f64 / cfg.warmup_iters as f64;
        lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * t)
    } else {
        lr
    }
}
