use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleShape {
    /// Linear warm-up (if any), then flat at `base_lr`.
    Constant,
    /// Linear warm-up to `base_lr`, then cosine decay to zero.
    WarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub shape: ScheduleShape,
}

impl ScheduleSpec {
    pub fn constant(base_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps,
            shape: ScheduleShape::Constant,
        }
    }

    pub fn warmup_cosine(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps,
            total_steps,
            shape: ScheduleShape::WarmupCosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || self.warmup_steps > self.total_steps {
            return Err(NumericsError::Contract(format!(
                "invalid schedule: base_lr {}, warmup {}, total {}",
                self.base_lr, self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based, `0 ..= total_steps`).
pub fn lr_at(schedule: &ScheduleSpec, step: u64) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(NumericsError::Contract(format!(
            "step {step} beyond total_steps {}",
            schedule.total_steps
        )));
    }
    let base = schedule.base_lr;
    let warm = schedule.warmup_steps;
    if step < warm {
        return Ok(base * step as f64 / warm as f64);
    }
    Ok(match schedule.shape {
        ScheduleShape::Constant => base,
        ScheduleShape::WarmupCosine => {
            let span = schedule.total_steps - warm;
            if span == 0 {
                base
            } else {
                let progress = (step - warm) as f64 / span as f64;
                base * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_midpoint() {
        let s = ScheduleSpec::warmup_cosine(1e-3, 100, 500);
        assert!((lr_at(&s, 50).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(&s, 100).unwrap(), 1e-3);
    }

    #[test]
    fn cosine_midpoint() {
        let s = ScheduleSpec::warmup_cosine(1e-3, 300, 2000);
        assert!((lr_at(&s, 1150).unwrap() - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn ends_at_zero_and_rejects_overrun() {
        let s = ScheduleSpec::warmup_cosine(1e-3, 300, 2000);
        assert!(lr_at(&s, 2000).unwrap().abs() < 1e-18);
        assert!(lr_at(&s, 2001).is_err());
    }

    #[test]
    fn constant_shape() {
        let s = ScheduleSpec::constant(1e-4, 20_000);
        assert_eq!(lr_at(&s, 0).unwrap(), 1e-4);
        assert_eq!(lr_at(&s, 20_000).unwrap(), 1e-4);
    }

    #[test]
    fn continuous_and_nonnegative() {
        for (warm, total) in [(0, 10), (3, 10), (10, 10), (100, 500)] {
            let s = ScheduleSpec::warmup_cosine(2e-3, warm, total);
            let mut prev_after_warm = f64::INFINITY;
            for step in 0..=total {
                let lr = lr_at(&s, step).unwrap();
                assert!(lr >= 0.0);
                if step >= warm {
                    assert!(lr <= prev_after_warm + 1e-18);
                    prev_after_warm = lr;
                }
            }
            if warm > 0 {
                let before = lr_at(&s, warm - 1).unwrap();
                let at = lr_at(&s, warm).unwrap();
                assert!((at - before - 2e-3 / warm as f64).abs() < 1e-12);
            }
        }
    }
}
