use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_proportion: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, total_steps: u64, warmup_proportion: f64) -> Result<Self> {
        let s = Self {
            peak_lr,
            total_steps,
            warmup_proportion,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule for `updates` optimizer steps, where update `k` (0-based)
    /// uses `lr_at(k + 1)`: no update runs at the zero endpoints.
    pub fn for_updates(peak_lr: f64, updates: u64, warmup_proportion: f64) -> Result<Self> {
        Self::new(peak_lr, updates + 1, warmup_proportion)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("peak lr {}", self.peak_lr)));
        }
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "warmup proportion {} not in (0,1)",
                self.warmup_proportion
            )));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "{} warmup steps leave no decay phase in {} total",
                self.warmup_steps(),
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_proportion * self.total_steps as f64).round() as u64).max(1)
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::OutOfRange(format!(
                "step {step} beyond {} total",
                self.total_steps
            )));
        }
        let warm = self.warmup_steps();
        Ok(if step < warm {
            self.peak_lr * step as f64 / warm as f64
        } else {
            self.peak_lr * (self.total_steps - step) as f64 / (self.total_steps - warm) as f64
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let s = Schedule::new(2e-5, 1000, 0.1).unwrap();
        assert_eq!(s.warmup_steps(), 100);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 2e-5);
        assert!((s.lr_at(550).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = Schedule::new(1.0, 20, 0.25).unwrap();
        let w = s.warmup_steps();
        let left = s.lr_at(w - 1).unwrap() + 1.0 / w as f64;
        assert!((left - s.lr_at(w).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn update_schedule_never_uses_zero_lr() {
        let s = Schedule::for_updates(1e-3, 1, 0.1).unwrap();
        assert_eq!(s.lr_at(1).unwrap(), 1e-3);
        let s = Schedule::for_updates(1e-3, 37, 0.1).unwrap();
        assert!((1..=37).all(|k| s.lr_at(k).unwrap() > 0.0));
    }

    #[test]
    fn rejects_degenerate() {
        assert!(Schedule::new(1.0, 1, 0.1).is_err());
        assert!(Schedule::new(1.0, 10, 0.0).is_err());
        assert!(Schedule::new(1.0, 10, 1.0).is_err());
        assert!(Schedule::new(-1.0, 10, 0.1).is_err());
    }
}
