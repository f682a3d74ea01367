//! Basal-bolus controller under test: basal rate plus a correction bolus
//! spread over the cycle, with a low-glucose delivery guard.

use serde::{Deserialize, Serialize};

use crate::types::{ControlAction, CYCLE_MINUTES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Background delivery, U/h.
    pub basal_rate: f64,
    /// How far one unit of insulin lowers BG, mg/dL per U.
    pub correction_factor: f64,
    /// Correction target, mg/dL.
    pub bg_target: f64,
    /// Pump ceiling, U/h.
    pub max_rate: f64,
    /// Pump floor, U/h.
    pub min_rate: f64,
    /// Delivery stops entirely below this BG, mg/dL.
    pub hypo_guard: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            basal_rate: 1.0,
            correction_factor: 30.0,
            bg_target: 120.0,
            max_rate: 3.0,
            min_rate: 0.0,
            hypo_guard: 80.0,
        }
    }
}

impl ControllerConfig {
    pub fn is_valid(&self) -> bool {
        self.max_rate > self.basal_rate
            && self.basal_rate > 0.0
            && self.correction_factor > 0.0
            && self.min_rate >= 0.0
    }
}

/// One control decision from measured BG and current IOB. The correction
/// term is the insulin still needed, `(bg - target)/CF - iob`, converted
/// from units to a rate over one cycle.
pub fn decide(bg: f64, iob: f64, cfg: &ControllerConfig, prev_rate: f64) -> ControlAction {
    let rate = if bg < cfg.hypo_guard {
        0.0
    } else {
        let needed_units = ((bg - cfg.bg_target) / cfg.correction_factor - iob).max(0.0);
        let rate = cfg.basal_rate + needed_units * (60.0 / CYCLE_MINUTES);
        rate.clamp(cfg.min_rate, cfg.max_rate)
    };
    ControlAction::from_rate(rate, prev_rate)
}
