use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrKind {
    NoamWarmup,
    Constant,
}

/// Learning-rate schedule.
///
/// `NoamWarmup` emits `factor * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`;
/// `Constant` emits `factor` at every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub warmup_steps: u64,
    pub factor: f64,
    pub model_dim: usize,
}

impl LrSchedule {
    pub fn noam(factor: f64, model_dim: usize, warmup_steps: u64) -> Self {
        Self {
            kind: LrKind::NoamWarmup,
            warmup_steps,
            factor,
            model_dim,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            kind: LrKind::Constant,
            warmup_steps: 1,
            factor: lr,
            model_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(NnError::Config("learning-rate factor must be positive".into()));
        }
        if self.kind == LrKind::NoamWarmup && (self.warmup_steps == 0 || self.model_dim == 0) {
            return Err(NnError::Config(
                "noam schedule needs positive warmup_steps and model_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> Result<f64, NnError> {
        if step == 0 {
            return Err(NnError::Domain("learning-rate steps are counted from 1".into()));
        }
        self.validate()?;
        Ok(match self.kind {
            LrKind::Constant => self.factor,
            LrKind::NoamWarmup => {
                let s = step as f64;
                let w = self.warmup_steps as f64;
                self.factor * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
            }
        })
    }

    /// Largest rate the schedule ever emits.
    pub fn peak(&self) -> f64 {
        self.lr(self.warmup_steps.max(1)).unwrap_or(self.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_warmup_and_half_at_four_times() {
        let s = LrSchedule::noam(5.0, 256, 25_000);
        let peak = s.lr(25_000).unwrap();
        let w = 25_000f64;
        assert!((w.powf(-0.5) - w * w.powf(-1.5)).abs() < 1e-18);
        assert!((s.lr(100_000).unwrap() - peak / 2.0).abs() < 1e-15);
        assert!(s.lr(24_999).unwrap() < peak);
        assert!(s.lr(25_001).unwrap() < peak);
        // 5.0 / 16 / sqrt(25000)
        assert!((peak - 5.0 / 16.0 / 25_000f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn strictly_monotone_around_warmup() {
        let s = LrSchedule::noam(2.0, 32, 50);
        let rates: Vec<f64> = (1..=200).map(|k| s.lr(k).unwrap()).collect();
        for k in 1..50 {
            assert!(rates[k] > rates[k - 1], "not increasing at {}", k + 1);
        }
        for k in 50..199 {
            assert!(rates[k + 1] < rates[k], "not decreasing at {}", k + 2);
        }
        assert!(rates.iter().all(|&r| r > 0.0));
    }

    #[test]
    fn step_zero_is_domain_error() {
        assert!(matches!(LrSchedule::constant(0.1).lr(0), Err(NnError::Domain(_))));
        assert_eq!(LrSchedule::constant(0.1).lr(7).unwrap(), 0.1);
    }
}
