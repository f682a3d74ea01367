//! Baseline safety engines sharing one per-cycle interface with the full
//! pipeline: a pure pass-through, the rule-based mitigator, a one-step
//! model-based detector/corrector, the feed-forward-control replacement
//! baseline, and the prediction-plus-single-step-action variant.

use serde::{Deserialize, Serialize};

use crate::actnet::{generate, ActModel};
use crate::controller::ControllerConfig;
use crate::engine::{Alert, EngineMode, History, SafetyEngine, ALERT_HAZARD};
use crate::hms::{rule_based_mitigate, HmsRule};
use crate::nn::SeqRegressor;
use crate::patient::{step as plant_step, PatientProfile, PlantState};
use crate::prednet::{two_level_scan, Normalizer, SeqModel, Trajectory};
use crate::types::{ContextVector, ControlAction, RegionSpec, ReachableSetSpec, SystemState};

/// Activation alert used by baselines without the full alert vocabulary.
pub const ALERT_ACTIVATED: &str = "Mitigation Activated!";

/// Engine selector for campaigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    None,
    Knowsafe,
    RuleBased,
    ModelBased,
    Ffc,
    LstmRrt,
    PredLstm,
}

impl EngineKind {
    pub const ALL: [EngineKind; 7] = [
        EngineKind::None,
        EngineKind::Knowsafe,
        EngineKind::RuleBased,
        EngineKind::ModelBased,
        EngineKind::Ffc,
        EngineKind::LstmRrt,
        EngineKind::PredLstm,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            EngineKind::None => "none",
            EngineKind::Knowsafe => "knowsafe",
            EngineKind::RuleBased => "rule_based",
            EngineKind::ModelBased => "model_based",
            EngineKind::Ffc => "ffc",
            EngineKind::LstmRrt => "lstm_rrt",
            EngineKind::PredLstm => "pred_lstm",
        }
    }

    pub fn parse(s: &str) -> Option<EngineKind> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }
}

/// One control cycle of a safety engine.
pub trait Mitigator {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>);

    /// Stealthy-attacker oracle: would this (state, action) pair trigger
    /// the engine's mitigation this cycle?
    fn would_alarm(&self, x: SystemState, u: ControlAction, history: &History) -> bool;

    fn mode(&self) -> EngineMode;

    /// Planning engines report their per-plan statistics; others have none.
    fn take_plan_stats(&mut self) -> Vec<crate::engine::PlanStat> {
        Vec::new()
    }
}

/// No mitigation: the ground-truth twin.
pub struct PassThrough;

impl Mitigator for PassThrough {
    fn step(
        &mut self,
        _x: SystemState,
        u: ControlAction,
        _history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        (u, Vec::new())
    }

    fn would_alarm(&self, _x: SystemState, _u: ControlAction, _history: &History) -> bool {
        false
    }

    fn mode(&self) -> EngineMode {
        EngineMode::Normal
    }
}

impl Mitigator for SafetyEngine {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        SafetyEngine::step(self, x, u, history)
    }

    fn would_alarm(&self, x: SystemState, u: ControlAction, history: &History) -> bool {
        SafetyEngine::would_alarm(self, x, u, history)
    }

    fn mode(&self) -> EngineMode {
        SafetyEngine::mode(self)
    }
}

fn context_of(x: &SystemState, history: &History) -> Option<ContextVector> {
    let prev = history.states.last()?;
    Some(ContextVector::new(
        x.bg,
        x.iob,
        x.bg - prev.bg,
        x.iob - prev.iob,
    ))
}

/// Context-matched rule mitigation with fixed magnitudes.
pub struct RuleBasedEngine {
    pub rules: Vec<HmsRule>,
    pub ctrl: ControllerConfig,
    active: bool,
}

impl RuleBasedEngine {
    pub fn new(rules: Vec<HmsRule>, ctrl: ControllerConfig) -> Self {
        Self {
            rules,
            ctrl,
            active: false,
        }
    }
}

impl Mitigator for RuleBasedEngine {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        let Some(ctx) = context_of(&x, history) else {
            return (u, Vec::new());
        };
        let out = rule_based_mitigate(&ctx, &self.rules, &u, &self.ctrl);
        let replaced = out != u;
        let mut alerts = Vec::new();
        if replaced && !self.active {
            alerts.push(Alert {
                t: x.t,
                msg: ALERT_ACTIVATED.into(),
            });
        }
        self.active = replaced;
        (out, alerts)
    }

    fn would_alarm(&self, x: SystemState, u: ControlAction, history: &History) -> bool {
        context_of(&x, history)
            .map(|ctx| rule_based_mitigate(&ctx, &self.rules, &u, &self.ctrl) != u)
            .unwrap_or(false)
    }

    fn mode(&self) -> EngineMode {
        if self.active {
            EngineMode::Mitigation
        } else {
            EngineMode::Normal
        }
    }
}

/// One-step plant-model detector: predicts the next BG under the proposed
/// command and replaces it while the prediction leaves the safe range,
/// until the state returns to the target band.
pub struct ModelBasedEngine {
    pub profile: PatientProfile,
    pub regions: RegionSpec,
    pub ctrl: ControllerConfig,
    shadow: Option<PlantState>,
    active: bool,
}

impl ModelBasedEngine {
    pub fn new(profile: PatientProfile, regions: RegionSpec, ctrl: ControllerConfig) -> Self {
        Self {
            profile,
            regions,
            ctrl,
            shadow: None,
            active: false,
        }
    }

    fn predict_next(&self, shadow: &PlantState, u: &ControlAction) -> f64 {
        plant_step(shadow, &self.profile, u, crate::types::CYCLE_MINUTES)
            .map(|s| s.g)
            .unwrap_or(f64::NAN)
    }

    fn corrective(&self, predicted: f64, u: &ControlAction) -> ControlAction {
        if predicted > self.regions.target_high {
            let rate = (u.rate * 1.5).max(self.ctrl.basal_rate).min(self.ctrl.max_rate);
            ControlAction::from_rate(rate, u.rate)
        } else if predicted < self.regions.target_low {
            ControlAction::from_rate(0.0, u.rate)
        } else {
            *u
        }
    }
}

impl Mitigator for ModelBasedEngine {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        let _ = history;
        let mut shadow = self
            .shadow
            .unwrap_or_else(|| PlantState::at_bg(&self.profile, x.bg));
        // Re-anchor the observable part each cycle; X and I stay modelled.
        shadow.g = x.bg;
        shadow.iob = x.iob;

        let predicted = self.predict_next(&shadow, &u);
        let mut alerts = Vec::new();
        let out = if self.active {
            if self.regions.in_target(x.bg) {
                self.active = false;
                u
            } else {
                self.corrective(predicted, &u)
            }
        } else if !(self.regions.hazard_low..=self.regions.hazard_high).contains(&predicted) {
            self.active = true;
            alerts.push(Alert {
                t: x.t,
                msg: ALERT_ACTIVATED.into(),
            });
            self.corrective(predicted, &u)
        } else {
            u
        };

        self.shadow = plant_step(&shadow, &self.profile, &out, crate::types::CYCLE_MINUTES).ok();
        (out, alerts)
    }

    fn would_alarm(&self, x: SystemState, u: ControlAction, _history: &History) -> bool {
        if self.active {
            return true;
        }
        let mut shadow = self
            .shadow
            .unwrap_or_else(|| PlantState::at_bg(&self.profile, x.bg));
        shadow.g = x.bg;
        shadow.iob = x.iob;
        let predicted = self.predict_next(&shadow, &u);
        !(self.regions.hazard_low..=self.regions.hazard_high).contains(&predicted)
    }

    fn mode(&self) -> EngineMode {
        if self.active {
            EngineMode::Mitigation
        } else {
            EngineMode::Normal
        }
    }
}

/// Single regressor from the BG window straight to a rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfcModel {
    pub window: usize,
    pub norm: Normalizer,
    net: SeqRegressor,
}

impl FfcModel {
    pub fn ensure_grads(&mut self) {
        self.net.ensure_grads();
    }

    pub fn predict_rate(&self, bgs: &[f64]) -> f64 {
        let inputs: Vec<Vec<f64>> = bgs.iter().map(|&b| vec![self.norm.bg(b)]).collect();
        let pass = self.net.forward(&inputs);
        (pass.ys.last().expect("non-empty window")[0] * self.norm.rate_scale
            + self.norm.rate_off)
            .max(0.0)
    }
}

/// Trains the feed-forward-control regressor on closed-loop data.
pub fn train_ffc(
    dataset: &[Trajectory],
    window: usize,
    hidden: (usize, usize),
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<FfcModel, crate::nn::NnError> {
    use crate::nn::{zero_grads, Adam};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let norm = Normalizer::default();
    let mut samples: Vec<(&Trajectory, usize)> = Vec::new();
    for traj in dataset {
        if traj.len() < window + 1 {
            continue;
        }
        for end in (window - 1)..traj.len() {
            samples.push((traj, end));
        }
    }
    if samples.is_empty() {
        return Err(crate::nn::NnError::EmptyDataset);
    }

    let mut net = SeqRegressor::new(1, 1, hidden, seed);
    let mut opt = Adam::new(lr);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xffc);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let visit = order.len().min(2000);
        for (batch_idx, chunk) in order[..visit].chunks(32).enumerate() {
            zero_grads(&mut net.tensors_mut());
            let mut batch_loss = 0.0;
            for &si in chunk {
                let (traj, end) = samples[si];
                let lo = end + 1 - window;
                let inputs: Vec<Vec<f64>> = (lo..=end)
                    .map(|t| vec![norm.bg(traj.states[t].bg)])
                    .collect();
                let pass = net.forward(&inputs);
                // Supervise every step against its concurrent rate.
                let dys: Vec<Vec<f64>> = pass
                    .ys
                    .iter()
                    .enumerate()
                    .map(|(j, y)| {
                        let target = norm.rate(traj.actions[lo + j].rate);
                        let e = y[0] - target;
                        batch_loss += e * e / (window * chunk.len()) as f64;
                        vec![2.0 * (y[0] - target) / (window * chunk.len()) as f64]
                    })
                    .collect();
                net.backward(&pass, &dys);
            }
            if !batch_loss.is_finite() {
                return Err(crate::nn::NnError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            opt.step(&mut net.tensors_mut());
        }
    }

    Ok(FfcModel { window, norm, net })
}

/// Feed-forward-control baseline: accumulate |y_ML - u_t| and replace the
/// controller output once the accumulated error crosses the threshold.
pub struct FfcEngine {
    pub model: FfcModel,
    pub threshold: f64,
    accum: f64,
    active: bool,
}

impl FfcEngine {
    pub fn new(model: FfcModel, threshold: f64) -> Self {
        Self {
            model,
            threshold,
            accum: 0.0,
            active: false,
        }
    }

    fn ml_rate(&self, x: &SystemState, history: &History) -> Option<f64> {
        let w = self.model.window;
        if history.len() + 1 < w {
            return None;
        }
        let lo = history.len() + 1 - w;
        let mut bgs: Vec<f64> = history.states[lo..].iter().map(|s| s.bg).collect();
        bgs.push(x.bg);
        Some(self.model.predict_rate(&bgs))
    }
}

impl Mitigator for FfcEngine {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        let Some(y_ml) = self.ml_rate(&x, history) else {
            return (u, Vec::new());
        };
        self.accum += (y_ml - u.rate).abs();
        let mut alerts = Vec::new();
        if self.accum > self.threshold {
            if !self.active {
                alerts.push(Alert {
                    t: x.t,
                    msg: ALERT_ACTIVATED.into(),
                });
                self.active = true;
            }
            (ControlAction::from_rate(y_ml, u.rate), alerts)
        } else {
            (u, alerts)
        }
    }

    fn would_alarm(&self, x: SystemState, u: ControlAction, history: &History) -> bool {
        match self.ml_rate(&x, history) {
            Some(y_ml) => self.accum + (y_ml - u.rate).abs() > self.threshold,
            None => false,
        }
    }

    fn mode(&self) -> EngineMode {
        if self.active {
            EngineMode::Mitigation
        } else {
            EngineMode::Normal
        }
    }
}

/// Two-level prediction with a single-step corrective action per cycle:
/// the planner is replaced by a one-reachable-step target toward the
/// middle of the target band.
pub struct PredLstmEngine {
    pub short: SeqModel,
    pub long: SeqModel,
    pub act: ActModel,
    pub regions: RegionSpec,
    pub constraints: ReachableSetSpec,
    budget: u32,
    k: u32,
    active: bool,
}

impl PredLstmEngine {
    pub fn new(
        short: SeqModel,
        long: SeqModel,
        act: ActModel,
        regions: RegionSpec,
        constraints: ReachableSetSpec,
    ) -> Self {
        Self {
            short,
            long,
            act,
            regions,
            constraints,
            budget: 0,
            k: 0,
            active: false,
        }
    }

    fn one_step_action(&self, x: &SystemState) -> Option<ControlAction> {
        let mid = 0.5 * (self.regions.target_low + self.regions.target_high);
        let step_bg = (mid - x.bg).clamp(self.constraints.bg_rate.lo, self.constraints.bg_rate.hi);
        let path = vec![(x.bg, x.iob), (x.bg + step_bg, x.iob)];
        generate(&self.act, &path).ok().map(|v| v[0])
    }

    fn scan(&self, x: SystemState, u: ControlAction, history: &History) -> Option<u32> {
        let (states, actions) = history.window_with(self.short.config.window, x, u)?;
        let (verdict, _) =
            two_level_scan(&self.short, &self.long, &states, &actions, &self.regions).ok()?;
        verdict.deadline
    }
}

impl Mitigator for PredLstmEngine {
    fn step(
        &mut self,
        x: SystemState,
        u: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        let mut alerts = Vec::new();
        if !self.active {
            if let Some(deadline) = self.scan(x, u, history) {
                self.active = true;
                self.budget = deadline.max(6);
                self.k = 0;
                alerts.push(Alert {
                    t: x.t,
                    msg: ALERT_HAZARD.into(),
                });
            } else {
                return (u, alerts);
            }
        }

        if self.regions.in_target(x.bg) || self.k >= self.budget {
            self.active = false;
            self.k = 0;
            return (u, alerts);
        }
        self.k += 1;
        match self.one_step_action(&x) {
            Some(a) => (a, alerts),
            None => (u, alerts),
        }
    }

    fn would_alarm(&self, x: SystemState, u: ControlAction, history: &History) -> bool {
        self.active || self.scan(x, u, history).is_some()
    }

    fn mode(&self) -> EngineMode {
        if self.active {
            EngineMode::Mitigation
        } else {
            EngineMode::Normal
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hms::default_rules;
    use crate::types::ActionKind;

    fn state(bg: f64, iob: f64, t: u32) -> SystemState {
        SystemState::new(bg, iob, t)
    }

    fn action(rate: f64) -> ControlAction {
        ControlAction {
            rate,
            kind: ActionKind::KeepInsulin,
        }
    }

    #[test]
    fn pass_through_never_alters() {
        let mut e = PassThrough;
        let h = History::default();
        let (a, alerts) = e.step(state(40.0, 0.0, 3), action(2.0), &h);
        assert_eq!(a.rate, 2.0);
        assert!(alerts.is_empty());
        assert!(!e.would_alarm(state(40.0, 0.0, 3), action(2.0), &h));
    }

    #[test]
    fn rule_based_replaces_on_low_bg() {
        let mut e = RuleBasedEngine::new(default_rules(), ControllerConfig::default());
        let mut h = History::default();
        h.push(state(82.0, 1.0, 0), action(1.0));
        // BG 75 < beta_10 = 80: stop delivery.
        let (a, alerts) = e.step(state(75.0, 1.0, 1), action(1.2), &h);
        assert_eq!(a.rate, 0.0);
        assert_eq!(alerts.len(), 1);
        assert_eq!(e.mode(), EngineMode::Mitigation);
    }

    #[test]
    fn model_based_activates_on_predicted_excursion() {
        let p = PatientProfile::by_name("adult-typical").unwrap();
        let mut e = ModelBasedEngine::new(p.clone(), RegionSpec::default(),
            ControllerConfig::default());
        let h = History::default();
        // Very high glucose, zero insulin proposed: the one-step
        // prediction stays above 180 and must trigger replacement.
        let (a, alerts) = e.step(state(200.0, 0.0, 0), action(0.0), &h);
        assert_eq!(alerts.len(), 1);
        assert!(a.rate > 0.0, "corrective must dose insulin, got {}", a.rate);
        assert!(e.would_alarm(state(200.0, 0.0, 1), action(0.0), &h));

        // In-range prediction from a mid state passes through.
        let mut e2 = ModelBasedEngine::new(p, RegionSpec::default(), ControllerConfig::default());
        let (a2, alerts2) = e2.step(state(130.0, 0.0, 0), action(1.0), &h);
        assert_eq!(a2.rate, 1.0);
        assert!(alerts2.is_empty());
    }

    #[test]
    fn ffc_replaces_after_threshold() {
        // Train a trivial model mapping flat BG windows to ~1 U/h.
        let traj = Trajectory {
            states: (0..40).map(|t| state(130.0, 1.0, t)).collect(),
            actions: (0..40).map(|_| action(1.0)).collect(),
        };
        let model = train_ffc(&[traj], 4, (4, 3), 40, 5e-3, 9).unwrap();
        let mut e = FfcEngine::new(model, 1.0);
        let mut h = History::default();
        for t in 0..3 {
            h.push(state(130.0, 1.0, t), action(1.0));
        }
        // Propose a wildly different rate: the gap accumulates past the
        // threshold and the ML rate takes over.
        let mut replaced = false;
        for t in 3..10 {
            let (a, _) = e.step(state(130.0, 1.0, t), action(3.0), &h);
            if (a.rate - 3.0).abs() > 0.5 {
                replaced = true;
                break;
            }
        }
        assert!(replaced, "FFC never replaced the controller output");
    }

    #[test]
    fn ffc_stays_quiet_on_matching_controller() {
        let traj = Trajectory {
            states: (0..40).map(|t| state(130.0, 1.0, t)).collect(),
            actions: (0..40).map(|_| action(1.0)).collect(),
        };
        let model = train_ffc(&[traj], 4, (4, 3), 40, 5e-3, 9).unwrap();
        let rate = {
            // Whatever the model converged to, propose exactly that.
            let bgs = vec![130.0; 4];
            model.predict_rate(&bgs)
        };
        let mut e = FfcEngine::new(model, 1.0);
        let mut h = History::default();
        for t in 0..3 {
            h.push(state(130.0, 1.0, t), action(rate));
        }
        for t in 3..30 {
            let (a, alerts) = e.step(state(130.0, 1.0, t), action(rate), &h);
            assert_eq!(a.rate, rate);
            assert!(alerts.is_empty());
        }
    }
}
