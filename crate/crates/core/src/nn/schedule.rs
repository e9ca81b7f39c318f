//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(
        initial_lr: f64,
        peak_lr: f64,
        final_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    ) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Argument(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        if [initial_lr, peak_lr, final_lr]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::Argument("learning rates must be finite and ≥ 0".into()));
        }
        Ok(Self {
            initial_lr,
            peak_lr,
            final_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate at `step ∈ [0, total_steps]`.
    ///
    /// With `warmup_steps == 0` the schedule starts directly at `peak_lr`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Argument(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.initial_lr + (self.peak_lr - self.initial_lr) * frac);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::new(1e-4, 5e-3, 2e-4, 10, 110).unwrap()
    }

    #[test]
    fn anchor_points() {
        let s = sched();
        assert_eq!(s.lr_at(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at(10).unwrap(), 5e-3);
        assert!((s.lr_at(110).unwrap() - 2e-4).abs() < 1e-18);
        // cosine midpoint
        assert!((s.lr_at(60).unwrap() - (5e-3 + 2e-4) / 2.0).abs() < 1e-15);
        assert!(s.lr_at(111).is_err());
    }

    #[test]
    fn continuous_at_warmup_and_nonincreasing_after() {
        let s = sched();
        let just_before = s.initial_lr + (s.peak_lr - s.initial_lr) * (9.999 / 10.0);
        assert!((s.lr_at(10).unwrap() - just_before).abs() < 1e-6);
        let tail: Vec<f64> = (10..=110).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(LrSchedule::new(1e-4, 5e-3, 1e-4, 10, 10).is_err());
        assert!(LrSchedule::new(-1.0, 5e-3, 1e-4, 1, 10).is_err());
    }
}
