//! Linear warm-up followed by cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{OmgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 6.7e-3,
            min_lr: 6.7e-6,
            total_epochs: 600,
            warmup_epochs: 300,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(OmgError::InvalidArgument(format!(
                "need 0 < min_lr <= base_lr, got {} and {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(OmgError::InvalidArgument(format!(
                "warm-up ({}) must be shorter than training ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Warm-up branch: rises linearly from `min_lr` at epoch 0 to exactly
    /// `base_lr` at the end of warm-up.
    pub fn warmup_lr(&self, epoch: f64) -> f64 {
        let remaining = 1.0 - epoch / self.warmup_epochs as f64;
        self.base_lr - (self.base_lr - self.min_lr) * remaining
    }

    /// Cosine branch: `base_lr` at the end of warm-up down to exactly
    /// `min_lr` at the last epoch.
    pub fn decay_lr(&self, epoch: f64) -> f64 {
        let span = (self.total_epochs - self.warmup_epochs) as f64;
        let progress = (epoch - self.warmup_epochs as f64) / span;
        self.min_lr
            + (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }

    /// Learning rate for `epoch` in `[0, total_epochs]`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch > self.total_epochs {
            return Err(OmgError::InvalidArgument(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        Ok(if epoch <= self.warmup_epochs && self.warmup_epochs > 0 {
            self.warmup_lr(epoch as f64)
        } else {
            self.decay_lr(epoch as f64)
        })
    }
}
