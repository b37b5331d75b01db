use crate::error::{Error, Result};

/// Exponential per-epoch decay: `base_lr * gamma^epoch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, gamma: 0.98 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base learning rate {} must be positive", self.base_lr)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("decay factor {} must lie in (0, 1)", self.gamma)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi(epoch as i32)
    }
}
