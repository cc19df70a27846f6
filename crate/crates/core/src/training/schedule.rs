use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup of {} epochs must be shorter than {} total",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "need 0 <= min_lr ({}) <= base_lr ({})",
                self.min_lr, self.base_lr
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        let total = self.total_steps();
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        let t = (step.min(total) - w) as f64 / (total - w) as f64;
        if t >= 1.0 {
            return self.min_lr;
        }
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> Schedule {
        Schedule {
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_epochs: 10,
            total_epochs: 300,
            steps_per_epoch: 7,
        }
    }

    #[test]
    fn endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(s.warmup_steps()), 1e-4);
        assert_eq!(s.lr_at(s.total_steps()), 1e-6);
    }

    #[test]
    fn continuous_at_junction() {
        let s = sched();
        let w = s.warmup_steps();
        let left = s.base_lr * (w as f64 - 1e-9) / w as f64;
        assert!((left - s.lr_at(w)).abs() < 1e-12);
        assert!((s.lr_at(w + 1) - s.lr_at(w)).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut s = sched();
        s.warmup_epochs = 300;
        assert!(s.validate().is_err());
        let mut s = sched();
        s.min_lr = 1.0;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_after_warmup(a in 0u64..2100, b in 0u64..2100) {
            let s = sched();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr_at(a) >= 0.0 && s.lr_at(a) <= s.base_lr);
            if lo >= s.warmup_steps() {
                prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
            } else if hi <= s.warmup_steps() {
                prop_assert!(s.lr_at(hi) >= s.lr_at(lo));
            }
        }
    }
}
