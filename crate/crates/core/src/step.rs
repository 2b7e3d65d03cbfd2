//! Step-size schedules and stopping rules shared by the iterative solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diminishing step size α(k) for round `k = 0, 1, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `c / (k+1)^exponent`; the shift keeps the first step finite.
    HarmonicPower { c: f64, exponent: f64 },
    /// `c / (k + shift)`.
    ShiftedHarmonic { c: f64, shift: f64 },
}

impl StepSchedule {
    pub fn edp_default() -> Self {
        StepSchedule::HarmonicPower {
            c: 100.0,
            exponent: 0.6,
        }
    }

    pub fn shedding_default() -> Self {
        StepSchedule::ShiftedHarmonic {
            c: 1000.0,
            shift: 500.0,
        }
    }

    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::HarmonicPower { c, exponent } => c / ((k + 1) as f64).powf(exponent),
            StepSchedule::ShiftedHarmonic { c, shift } => c / (k as f64 + shift),
        }
    }

    /// Rejects schedules that are not positive, nonincreasing, square-summable
    /// and non-summable.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::HarmonicPower { c, exponent } => {
                c > 0.0 && exponent > 0.5 && exponent <= 1.0
            }
            StepSchedule::ShiftedHarmonic { c, shift } => c > 0.0 && shift > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "inadmissible step schedule {self:?}"
            )))
        }
    }
}

/// Termination test: either the budget runs out, or the residual is small and
/// the iterates have stopped moving over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    pub max_iterations: usize,
    /// Relative to `max(1, scale)`, where the scale is stage specific.
    pub residual_tol: f64,
    pub change_tol: f64,
    pub window: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_iterations: 50_000,
            residual_tol: 5e-3,
            change_tol: 1e-5,
            window: 100,
        }
    }
}

impl StopRule {
    pub fn threshold(&self, scale: f64) -> f64 {
        self.residual_tol * scale.abs().max(1.0)
    }
}

/// Tracks the largest per-component movement over a sliding window of rounds.
#[derive(Debug, Clone)]
pub struct ChangeMonitor {
    window: usize,
    anchor: Vec<f64>,
    anchor_k: usize,
    last_change: f64,
}

impl ChangeMonitor {
    pub fn new(window: usize, initial: &[f64]) -> Self {
        ChangeMonitor {
            window: window.max(1),
            anchor: initial.to_vec(),
            anchor_k: 0,
            last_change: f64::INFINITY,
        }
    }

    /// Feeds the iterate after round `k` and returns the max change measured
    /// at the most recent window boundary.
    pub fn observe(&mut self, k: usize, current: &[f64]) -> f64 {
        if k >= self.anchor_k + self.window {
            self.last_change = self
                .anchor
                .iter()
                .zip(current)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            self.anchor.copy_from_slice(current);
            self.anchor_k = k;
        }
        self.last_change
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedules_match_reference_values() {
        let h = StepSchedule::edp_default();
        assert_eq!(h.alpha(0), 100.0);
        assert!((h.alpha(9) - 100.0 / 10f64.powf(0.6)).abs() < 1e-12);
        let s = StepSchedule::shedding_default();
        assert_eq!(s.alpha(0), 2.0);
        assert_eq!(s.alpha(500), 1.0);
    }

    #[test]
    fn inadmissible_exponent_rejected() {
        assert!(StepSchedule::HarmonicPower {
            c: 1.0,
            exponent: 0.5
        }
        .validate()
        .is_err());
        assert!(StepSchedule::HarmonicPower {
            c: 1.0,
            exponent: 1.0
        }
        .validate()
        .is_ok());
        assert!(StepSchedule::ShiftedHarmonic {
            c: -1.0,
            shift: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn change_monitor_reports_window_movement() {
        let mut m = ChangeMonitor::new(2, &[0.0]);
        assert!(m.observe(1, &[1.0]).is_infinite());
        assert_eq!(m.observe(2, &[3.0]), 3.0);
        assert_eq!(m.observe(3, &[3.5]), 3.0);
        assert_eq!(m.observe(4, &[3.5]), 0.5);
    }

    proptest! {
        #[test]
        fn alpha_positive_and_nonincreasing(
            c in 0.1f64..1000.0,
            e in 0.51f64..1.0,
            shift in 0.5f64..1000.0,
            k in 0usize..100_000,
        ) {
            for s in [
                StepSchedule::HarmonicPower { c, exponent: e },
                StepSchedule::ShiftedHarmonic { c, shift },
            ] {
                prop_assert!(s.alpha(k) > 0.0);
                prop_assert!(s.alpha(k + 1) <= s.alpha(k));
            }
        }
    }
}
