use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to `floor_factor * base_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub floor_factor: f64,
}

impl LrSchedule {
    pub fn new(
        base_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        floor_factor: f64,
    ) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            floor_factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor_factor > 0.0 && self.floor_factor <= 1.0) {
            return Err(Error::config(format!(
                "floor factor {} outside (0, 1]",
                self.floor_factor
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup {} must be shorter than {} total epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0) {
            return Err(Error::config("base learning rate must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for `epoch`. Warmup epochs ramp as
    /// `(epoch + 1) / warmup * base`, so the rate reaches `base` at
    /// `epoch == warmup_epochs`; from there a half cosine ends at
    /// `floor_factor * base` on the final epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let span = self.total_epochs - 1 - self.warmup_epochs;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let progress = (epoch - self.warmup_epochs) as f64 / span as f64;
        let floor = self.floor_factor * self.base_lr;
        Ok(floor + (self.base_lr - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::new(1e-4, 20, 100, 0.01).unwrap()
    }

    #[test]
    fn warmup_ramp_starts_at_base_over_warmup() {
        assert!((sched().lr_at(0).unwrap() - 1e-4 / 20.0).abs() < 1e-18);
    }

    #[test]
    fn final_epoch_hits_floor() {
        assert!((sched().lr_at(99).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = sched();
        assert!((s.lr_at(20).unwrap() - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(19).unwrap() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn non_increasing_after_warmup() {
        let s = sched();
        let lrs: Vec<f64> = (20..100).map(|e| s.lr_at(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn out_of_range_epoch_is_contract_error() {
        assert!(matches!(sched().lr_at(100), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(LrSchedule::new(1e-4, 10, 10, 0.01).is_err());
        assert!(LrSchedule::new(1e-4, 1, 10, 0.0).is_err());
        assert!(LrSchedule::new(1e-4, 1, 10, 1.5).is_err());
    }
}
