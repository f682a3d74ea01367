//! CUSUM sensor-attack detector: a one-step predictor supplies the
//! expected measurement, absolute residuals accumulate with a bias
//! drain, and an alarm fires when the accumulator crosses the threshold.
//! On alarm the caller substitutes the prediction for the measurement.

use serde::{Deserialize, Serialize};

use crate::nn::NnError;
use crate::prednet::{predict, SeqModel};
use crate::types::{ControlAction, SystemState};

/// Pure accumulator update: `S' = max(0, S + delta - b)`.
pub fn accumulate(s: f64, delta: f64, b: f64) -> f64 {
    (s + delta - b).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumConfig {
    /// Alarm threshold on the accumulator.
    pub tau: f64,
    /// Bias drained per cycle; keeps clean-run noise from accumulating.
    pub b: f64,
}

impl Default for CusumConfig {
    fn default() -> Self {
        Self { tau: 10.0, b: 2.0 }
    }
}

/// Detector state around a trained one-step predictor.
pub struct CusumGuard {
    pub model: SeqModel,
    pub cfg: CusumConfig,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CusumStep {
    pub alarm: bool,
    pub predicted_bg: f64,
    pub delta: f64,
    pub s: f64,
}

impl CusumGuard {
    pub fn new(model: SeqModel, cfg: CusumConfig) -> Self {
        Self { model, cfg, s: 0.0 }
    }

    pub fn reset(&mut self) {
        self.s = 0.0;
    }

    /// One detection step: predict the current measurement from the
    /// history window ending at the previous cycle, accumulate the
    /// residual, and compare against the threshold.
    pub fn step(
        &mut self,
        measured_bg: f64,
        states: &[SystemState],
        actions: &[ControlAction],
    ) -> Result<CusumStep, NnError> {
        let predicted = predict(&self.model, states, actions)?[0].0;
        let delta = (measured_bg - predicted).abs();
        self.s = accumulate(self.s, delta, self.cfg.b);
        Ok(CusumStep {
            alarm: self.s > self.cfg.tau,
            predicted_bg: predicted,
            delta,
            s: self.s,
        })
    }
}

/// Bias default: a high percentile of clean-run residuals.
pub fn calibrate_bias(clean_deltas: &[f64], percentile: f64) -> f64 {
    if clean_deltas.is_empty() {
        return 1.0;
    }
    let mut sorted = clean_deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() - 1) as f64 * percentile).round() as usize;
    sorted[idx]
}

/// One labelled residual sequence for the ROC sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub deltas: Vec<f64>,
    pub attacked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Per-trace detection: does the accumulator ever cross tau?
fn detects(deltas: &[f64], b: f64, tau: f64) -> bool {
    let mut s = 0.0;
    for &d in deltas {
        s = accumulate(s, d, b);
        if s > tau {
            return true;
        }
    }
    false
}

/// Sweeps the threshold over labelled traces.
pub fn roc_sweep(traces: &[ResidualTrace], b: f64, taus: &[f64]) -> Vec<RocPoint> {
    taus.iter()
        .map(|&tau| {
            let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
            for tr in traces {
                let hit = detects(&tr.deltas, b, tau);
                if tr.attacked {
                    pos += 1;
                    if hit {
                        tp += 1;
                    }
                } else {
                    neg += 1;
                    if hit {
                        fp += 1;
                    }
                }
            }
            RocPoint {
                tau,
                tpr: if pos == 0 { 0.0 } else { tp as f64 / pos as f64 },
                fpr: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_arithmetic() {
        // S=0, delta=2, b=1 -> S'=1.
        assert_eq!(accumulate(0.0, 2.0, 1.0), 1.0);
        // Residuals below the bias never build up.
        let mut s = 0.0;
        for _ in 0..100 {
            s = accumulate(s, 0.5, 1.0);
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn sustained_surge_alarm_delay_is_closed_form() {
        // delta - b = 3 per step, tau = 10: S crosses at step 4.
        let (b, tau) = (1.0, 10.0);
        let mut s = 0.0;
        let mut alarm_at = None;
        for step in 1..=10 {
            s = accumulate(s, 4.0, b);
            if s > tau {
                alarm_at = Some(step);
                break;
            }
        }
        assert_eq!(alarm_at, Some(4));
        // ceil(tau / (delta - b)) in general, on synthetic traces.
        for (delta, b, tau) in [(3.0f64, 1.0, 7.0), (5.0, 2.0, 12.0), (2.5, 0.5, 9.0)] {
            let expected = (tau / (delta - b)).floor() as usize + 1;
            let mut s = 0.0;
            let mut got = None;
            for step in 1..=1000 {
                s = accumulate(s, delta, b);
                if s > tau {
                    got = Some(step);
                    break;
                }
            }
            assert_eq!(got, Some(expected), "delta={delta} b={b} tau={tau}");
        }
    }

    #[test]
    fn s_stays_non_negative_and_drains() {
        let mut s = 25.0;
        for _ in 0..100 {
            s = accumulate(s, 0.2, 1.0);
            assert!(s >= 0.0);
        }
        assert_eq!(s, 0.0);
    }

    #[test]
    fn bias_calibration_takes_percentile() {
        let deltas: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let b = calibrate_bias(&deltas, 0.9);
        assert!((b - 0.89).abs() < 0.02, "{b}");
        assert_eq!(calibrate_bias(&[], 0.9), 1.0);
    }

    #[test]
    fn roc_orders_with_threshold() {
        // Attacked traces carry sustained large residuals.
        let traces: Vec<ResidualTrace> = (0..20)
            .map(|i| {
                let attacked = i % 2 == 0;
                let base = if attacked { 3.0 } else { 0.4 };
                ResidualTrace {
                    deltas: vec![base; 30],
                    attacked,
                }
            })
            .collect();
        let points = roc_sweep(&traces, 1.0, &[1.0, 5.0, 20.0, 1000.0]);
        // Perfect separation at sane thresholds.
        assert_eq!(points[1].tpr, 1.0);
        assert_eq!(points[1].fpr, 0.0);
        // Absurdly high threshold detects nothing.
        assert_eq!(points[3].tpr, 0.0);
        // TPR is non-increasing in tau.
        for w in points.windows(2) {
            assert!(w[1].tpr <= w[0].tpr + 1e-12);
        }
    }
}
