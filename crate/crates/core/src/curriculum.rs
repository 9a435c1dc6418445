//! Global blend schedule: FP warmup, quartic ramp to 0.5, quadratic ramp to full.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    warmup_end: usize,
    ramp_end: usize,
    horizon: usize,
    alpha_max: f64,
}

impl Schedule {
    pub fn new(warmup_end: usize, ramp_end: usize, horizon: usize) -> Result<Self> {
        Self::with_cap(warmup_end, ramp_end, horizon, 1.0)
    }

    /// Schedule whose final branch saturates at `alpha_max` instead of 1.
    pub fn with_cap(
        warmup_end: usize,
        ramp_end: usize,
        horizon: usize,
        alpha_max: f64,
    ) -> Result<Self> {
        if warmup_end >= ramp_end {
            return Err(Error::invalid(format!(
                "warmup end {warmup_end} must precede ramp end {ramp_end}"
            )));
        }
        if horizon == 0 {
            return Err(Error::invalid("schedule horizon must be at least 1"));
        }
        if !(0.5..=1.0).contains(&alpha_max) {
            return Err(Error::invalid(format!(
                "alpha_max {alpha_max} outside [0.5, 1]"
            )));
        }
        Ok(Self {
            warmup_end,
            ramp_end,
            horizon,
            alpha_max,
        })
    }

    pub fn warmup_end(&self) -> usize {
        self.warmup_end
    }

    pub fn ramp_end(&self) -> usize {
        self.ramp_end
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// First epoch at which the blend reaches its terminal value.
    pub fn saturation_epoch(&self) -> usize {
        self.ramp_end + self.horizon
    }

    /// Blend coefficient at a (possibly fractional) epoch `t >= 0`.
    pub fn lambda_at<T: Scalar>(&self, t: T) -> T {
        let half = T::of(0.5);
        let (ew, ef, h) = (
            T::count(self.warmup_end),
            T::count(self.ramp_end),
            T::count(self.horizon),
        );
        if t < ew {
            T::zero()
        } else if t < ef {
            let r = (t - ew) / (ef - ew);
            (r.powi(4) * half).min(half)
        } else {
            let r = ((t - ef) / h).min(T::one());
            half + r * r * (T::of(self.alpha_max) - half)
        }
    }

    pub fn lambda<T: Scalar>(&self, epoch: usize) -> T {
        self.lambda_at(T::count(epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_values() {
        let s = Schedule::new(10, 50, 20).unwrap();
        assert_eq!(s.lambda::<f64>(9), 0.0);
        assert_eq!(s.lambda::<f64>(30), 0.03125);
        assert_eq!(s.lambda::<f64>(50), 0.5);
        assert_eq!(s.lambda::<f64>(60), 0.625);
        assert_eq!(s.lambda::<f64>(70), 1.0);
        assert_eq!(s.lambda::<f64>(100), 1.0);
        assert_eq!(s.lambda::<f32>(60), 0.625);
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::new(10, 10, 5).is_err());
        assert!(Schedule::new(10, 5, 5).is_err());
        assert!(Schedule::new(0, 5, 0).is_err());
        assert!(Schedule::with_cap(0, 5, 5, 0.3).is_err());
    }

    #[test]
    fn capped_final_branch() {
        let s = Schedule::with_cap(10, 50, 20, 0.8).unwrap();
        assert_eq!(s.lambda::<f64>(50), 0.5);
        assert!((s.lambda::<f64>(70) - 0.8).abs() < 1e-15);
        assert!((s.lambda::<f64>(200) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_ramp_end() {
        let s = Schedule::new(10, 50, 20).unwrap();
        let below = s.lambda_at(50.0f64 - 1e-9);
        assert!((below - 0.5).abs() < 1e-9);
        assert_eq!(s.lambda_at(50.0f64), 0.5);
    }
}
