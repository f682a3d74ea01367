//! Harness configuration: one TOML file covers every module's knobs, with
//! defaults matching the bundled desk-scale setup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::fault::GridScale;
use crate::guard::CusumConfig;
use crate::hms::HmsRule;
use crate::patient::PatientProfile;
use crate::planner::{PlanConfig, SampleBounds};
use crate::types::{RegionSpec, ReachableSetSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

fn default_theta() -> f64 {
    10.0
}
fn default_quick_factor() -> f64 {
    2.0
}
fn default_cycles() -> u32 {
    150
}
fn default_seed() -> u64 {
    2024
}
fn default_ffc_threshold() -> f64 {
    4.0
}
fn default_window() -> usize {
    12
}
fn default_short_horizon() -> usize {
    6
}
fn default_long_horizon() -> usize {
    24
}
fn default_hidden() -> (usize, usize) {
    (32, 16)
}
fn default_eta() -> f64 {
    0.7
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    3e-3
}
fn default_max_windows() -> Option<usize> {
    Some(2500)
}

/// Model-training knobs shared by the predictors and the action model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_short_horizon")]
    pub short_horizon: usize,
    #[serde(default = "default_long_horizon")]
    pub long_horizon: usize,
    #[serde(default = "default_hidden")]
    pub hidden: (usize, usize),
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_windows")]
    pub max_windows_per_epoch: Option<usize>,
    /// Which of the four cross-validation folds is held out.
    #[serde(default)]
    pub fold: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            short_horizon: default_short_horizon(),
            long_horizon: default_long_horizon(),
            hidden: default_hidden(),
            eta: default_eta(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            max_windows_per_epoch: default_max_windows(),
            fold: 0,
        }
    }
}

/// Everything the campaign runner and CLI need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    #[serde(default = "PatientProfile::bundled")]
    pub patients: Vec<PatientProfile>,
    #[serde(default)]
    pub regions: RegionSpec,
    #[serde(default)]
    pub constraints: ReachableSetSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub guard: CusumConfig,
    /// Replan threshold on BG execution error, mg/dL.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Constraint widening under quick mitigation.
    #[serde(default = "default_quick_factor")]
    pub quick_factor: f64,
    #[serde(default = "default_ffc_threshold")]
    pub ffc_threshold: f64,
    #[serde(default = "default_cycles")]
    pub cycles: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Mitigation rules; the ten defaults ship in config/rules.toml.
    #[serde(default = "crate::hms::default_rules")]
    pub rules: Vec<HmsRule>,
}

fn default_k_max() -> usize {
    2000
}
fn default_delta_x() -> (f64, f64) {
    (3.0, 0.1)
}
fn default_gamma() -> f64 {
    2.0
}
fn default_goal_bias() -> f64 {
    0.1
}

/// Planner knobs minus the per-plan fields (budget, quick flag, entry
/// derivative), which the engine sets at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSection {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_delta_x")]
    pub delta_x: (f64, f64),
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_goal_bias")]
    pub goal_bias: f64,
    #[serde(default)]
    pub sample_bounds: SampleBounds,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            k_max: default_k_max(),
            delta_x: default_delta_x(),
            gamma: default_gamma(),
            goal_bias: default_goal_bias(),
            sample_bounds: SampleBounds::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<HarnessConfig, ConfigError> {
        let cfg: HarnessConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.regions.is_ordered() {
            return Err(ConfigError::Invalid("region boundaries out of order".into()));
        }
        if !self.controller.is_valid() {
            return Err(ConfigError::Invalid("controller config invalid".into()));
        }
        for p in &self.patients {
            p.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for r in &self.rules {
            r.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.patients.is_empty() {
            return Err(ConfigError::Invalid("no patients configured".into()));
        }
        Ok(())
    }

    /// Planner template with the campaign-level knobs filled in.
    pub fn plan_template(&self) -> PlanConfig {
        PlanConfig {
            k_max: self.planner.k_max,
            delta_x: self.planner.delta_x,
            gamma: self.planner.gamma,
            goal_bias: self.planner.goal_bias,
            sample_bounds: self.planner.sample_bounds,
            quick_factor: self.quick_factor,
            constraints: self.constraints,
            regions: self.regions,
            ..PlanConfig::default()
        }
    }

    pub fn profile(&self, name: &str) -> Option<&PatientProfile> {
        self.patients.iter().find(|p| p.name == name)
    }
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            patients: PatientProfile::bundled(),
            regions: RegionSpec::default(),
            constraints: ReachableSetSpec::default(),
            controller: ControllerConfig::default(),
            planner: PlannerSection::default(),
            training: TrainingConfig::default(),
            guard: CusumConfig::default(),
            theta: default_theta(),
            quick_factor: default_quick_factor(),
            ffc_threshold: default_ffc_threshold(),
            cycles: default_cycles(),
            seed: default_seed(),
            rules: crate::hms::default_rules(),
        }
    }
}

/// Campaign-scale selection for the CLI.
pub fn parse_scale(s: &str) -> Result<GridScale, ConfigError> {
    match s {
        "desk" => Ok(GridScale::DESK),
        "full" => Ok(GridScale::FULL),
        other => {
            let parts: Vec<&str> = other.split('x').collect();
            if parts.len() == 3 {
                let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse()).collect();
                if let Ok(n) = nums {
                    return Ok(GridScale {
                        starts: n[0],
                        durations: n[1],
                        initial_bgs: n[2],
                    });
                }
            }
            Err(ConfigError::Parse(format!(
                "unknown scale '{other}' (use desk, full, or SxDxB)"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = HarnessConfig::default();
        let text = cfg.to_toml();
        let back = HarnessConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = HarnessConfig::from_toml("theta = 12.5\ncycles = 100\n").unwrap();
        assert_eq!(cfg.theta, 12.5);
        assert_eq!(cfg.cycles, 100);
        assert_eq!(cfg.patients.len(), 3);
        assert_eq!(cfg.regions, RegionSpec::default());
        assert_eq!(cfg.rules.len(), 10);
    }

    #[test]
    fn invalid_regions_rejected() {
        let mut cfg = HarnessConfig::default();
        cfg.regions.target_low = 500.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scale_parsing() {
        assert_eq!(parse_scale("desk").unwrap(), GridScale::DESK);
        assert_eq!(parse_scale("full").unwrap(), GridScale::FULL);
        assert_eq!(
            parse_scale("2x1x3").unwrap(),
            GridScale {
                starts: 2,
                durations: 1,
                initial_bgs: 3
            }
        );
        assert!(parse_scale("big").is_err());
    }
}
