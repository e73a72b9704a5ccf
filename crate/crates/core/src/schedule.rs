//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use crate::error::{DarnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Schedule {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps <= self.warmup_steps {
            return Err(DarnError::config(format!(
                "total steps {} must exceed warmup steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(DarnError::config(format!(
                "need 0 <= min_lr <= base_lr, got min_lr {} base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at step `t ∈ [0, T]`.
    pub fn lr_at(&self, t: u64) -> Result<f64> {
        self.validate()?;
        let (w, total) = (self.warmup_steps, self.total_steps);
        if t > total {
            return Err(DarnError::Domain(format!("step {t} beyond total {total}")));
        }
        if t < w {
            return Ok(self.base_lr * (t + 1) as f64 / w as f64);
        }
        let phase = PI * (t - w) as f64 / (total - w) as f64;
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + phase.cos()))
    }
}
