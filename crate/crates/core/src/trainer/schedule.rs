//! Warm-up, hold and cosine-decay learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: f64,
    pub hold: f64,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup: 0.1,
            hold: 0.4,
            decay: 0.5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err("trainer.base_lr must be > 0"));
        }
        for (k, v) in [("trainer.warmup", self.warmup), ("trainer.hold", self.hold), ("trainer.decay", self.decay)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        let sum = self.warmup + self.hold + self.decay;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config_err(format!(
                "trainer.warmup + trainer.hold + trainer.decay must equal 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total` steps: linear from 0 to the base rate
/// over the warm-up share, constant over the hold share, then a half cosine to 0.
pub fn lr_at(step: usize, total: usize, s: &Schedule) -> Result<f64> {
    if step > total {
        return Err(usage_err(format!("step {step} exceeds total {total}")));
    }
    if total == 0 {
        return Ok(s.base_lr);
    }
    let t = total as f64;
    let x = step as f64;
    let warm_end = s.warmup * t;
    let hold_end = (s.warmup + s.hold) * t;
    if x < warm_end {
        return Ok(s.base_lr * x / warm_end);
    }
    if x <= hold_end || hold_end >= t {
        return Ok(s.base_lr);
    }
    let u = ((x - hold_end) / (t - hold_end)).min(1.0);
    Ok(s.base_lr * 0.5 * (1.0 + (PI * u).cos()))
}
