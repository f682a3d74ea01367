//! Run-time safety engine: scan for predicted hazards with the two-level
//! models, plan a mitigation path under the remaining budget, realize it
//! with generated corrective actions, track execution error against the
//! plan, and replan or stand down as the state evolves.

use serde::{Deserialize, Serialize};

use crate::actnet::{generate, ActModel};
use crate::planner::{check_path, plan, plan_unconstrained, PlanConfig, PlanResult};
use crate::prednet::{two_level_scan, SeqModel};
use crate::types::{ControlAction, RegionSpec, SystemState};

/// One planning attempt, kept for the campaign metrics. `satisfied` is a
/// post-hoc check of the returned path against the strict (unwidened)
/// domain constraints, whatever constraint set the planner itself used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStat {
    pub t: u32,
    pub found: bool,
    pub ttmh: u32,
    pub conv_trials: usize,
    pub satisfied: bool,
}

pub const ALERT_HAZARD: &str = "Hazard Detected. Please Perform Mit. Immediately!";
pub const ALERT_PLAN: &str = "Suggested Mit. Plan Generated!";
pub const ALERT_UPDATED: &str = "Mit. Plan Updated!";
pub const ALERT_FAILURE: &str = "Mit. Failure!";
pub const ALERT_NOT_FOUND: &str = "Mit. Path Not Found!";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub t: u32,
    pub msg: String,
}

/// Rolling closed-loop history of observed states and actuated actions.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub states: Vec<SystemState>,
    pub actions: Vec<ControlAction>,
}

impl History {
    pub fn push(&mut self, s: SystemState, a: ControlAction) {
        self.states.push(s);
        self.actions.push(a);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Last `w - 1` past entries plus the current pair, when available.
    pub fn window_with(
        &self,
        w: usize,
        x: SystemState,
        u: ControlAction,
    ) -> Option<(Vec<SystemState>, Vec<ControlAction>)> {
        if self.len() + 1 < w {
            return None;
        }
        let lo = self.len() + 1 - w;
        let mut states = self.states[lo..].to_vec();
        let mut actions = self.actions[lo..].to_vec();
        states.push(x);
        actions.push(u);
        Some((states, actions))
    }

    /// Observed per-cycle derivative ending at the current state.
    pub fn last_step(&self, x: &SystemState) -> (f64, f64) {
        match self.states.last() {
            Some(prev) => (x.bg - prev.bg, x.iob - prev.iob),
            None => (0.0, 0.0),
        }
    }
}

/// Execution error between the planned waypoint and the observed state:
/// BG distance only, since IOB is a derived bookkeeping quantity on an
/// incommensurate scale.
pub fn err(expected: (f64, f64), actual: &SystemState) -> f64 {
    (expected.0 - actual.bg).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Normal,
    Mitigation,
}

/// Mutable mode-machine state of the engine.
#[derive(Debug, Clone, Default)]
pub struct EngineState {
    pub mit_enable: bool,
    /// Cycles elapsed in the current mitigation.
    pub k_mit: u32,
    /// Remaining-budget ceiling for the current mitigation.
    pub budget: u32,
    pub quick_mit: bool,
    pub plan: Option<PlanResult>,
    pub actions: Vec<ControlAction>,
}

/// The full prediction-planning-action pipeline. With `constrained` false
/// it degrades to the baseline that plans without derivative constraints
/// (paired with eta = 1 models by the caller).
pub struct SafetyEngine {
    pub short: SeqModel,
    pub long: SeqModel,
    pub act: ActModel,
    pub plan_template: PlanConfig,
    pub regions: RegionSpec,
    /// Replan threshold on BG error, mg/dL.
    pub theta: f64,
    pub constrained: bool,
    pub seed: u64,
    pub state: EngineState,
    plan_log: Vec<PlanStat>,
}

impl SafetyEngine {
    pub fn new(
        short: SeqModel,
        long: SeqModel,
        act: ActModel,
        plan_template: PlanConfig,
        regions: RegionSpec,
        theta: f64,
        constrained: bool,
        seed: u64,
    ) -> Self {
        Self {
            short,
            long,
            act,
            plan_template,
            regions,
            theta,
            constrained,
            seed,
            state: EngineState::default(),
            plan_log: Vec::new(),
        }
    }

    pub fn mode(&self) -> EngineMode {
        if self.state.mit_enable {
            EngineMode::Mitigation
        } else {
            EngineMode::Normal
        }
    }

    pub fn reset(&mut self) {
        self.state = EngineState::default();
        self.plan_log.clear();
    }

    pub fn take_plan_stats(&mut self) -> Vec<PlanStat> {
        std::mem::take(&mut self.plan_log)
    }

    fn try_plan(
        &mut self,
        x: &SystemState,
        budget: u32,
        quick: bool,
        prev_step: (f64, f64),
        t: u32,
    ) -> Option<(PlanResult, Vec<ControlAction>)> {
        if budget == 0 {
            return None;
        }
        let cfg = PlanConfig {
            budget,
            quick_mit: quick,
            prev_step,
            ..self.plan_template.clone()
        };
        let seed = self.seed ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let planned = if self.constrained {
            plan((x.bg, x.iob), &cfg, seed)
        } else {
            plan_unconstrained((x.bg, x.iob), &cfg, seed)
        };
        let result = match planned {
            Ok(r) => r,
            Err(_) => {
                self.plan_log.push(PlanStat {
                    t,
                    found: false,
                    ttmh: 0,
                    conv_trials: cfg.k_max,
                    satisfied: false,
                });
                return None;
            }
        };
        let strict_ok = check_path(
            &result.path,
            &self.plan_template.constraints,
            &self.plan_template.regions,
            budget,
            Some(prev_step),
        )
        .valid;
        self.plan_log.push(PlanStat {
            t,
            found: true,
            ttmh: result.ttmh,
            conv_trials: result.conv_trials,
            satisfied: strict_ok,
        });
        if result.path.len() < 2 {
            // Degenerate in-target path: nothing to actuate.
            return Some((result, Vec::new()));
        }
        let actions = generate(&self.act, &result.path).ok()?;
        Some((result, actions))
    }

    /// One control cycle. `u_t` is the controller's proposed action after
    /// any fault injection; `history` holds past observed states and
    /// actuated actions (not yet including this cycle).
    pub fn step(
        &mut self,
        x: SystemState,
        u_t: ControlAction,
        history: &History,
    ) -> (ControlAction, Vec<Alert>) {
        let t = x.t;
        let mut alerts = Vec::new();

        if !self.state.mit_enable {
            self.state.k_mit = 0;
            let scan = history
                .window_with(self.short.config.window, x, u_t)
                .and_then(|(states, actions)| {
                    two_level_scan(&self.short, &self.long, &states, &actions, &self.regions).ok()
                });
            if let Some((verdict, quick)) = scan {
                if verdict.hazard {
                    let budget = verdict.deadline.expect("hazard implies deadline");
                    match self.try_plan(&x, budget, quick, history.last_step(&x), t) {
                        None => {
                            alerts.push(Alert {
                                t,
                                msg: ALERT_NOT_FOUND.into(),
                            });
                            return (u_t, alerts);
                        }
                        Some((plan, actions)) => {
                            self.state = EngineState {
                                mit_enable: true,
                                k_mit: 0,
                                budget,
                                quick_mit: quick,
                                plan: Some(plan),
                                actions,
                            };
                            alerts.push(Alert {
                                t,
                                msg: ALERT_HAZARD.into(),
                            });
                            alerts.push(Alert {
                                t,
                                msg: ALERT_PLAN.into(),
                            });
                            // Fall through: the first corrective action is
                            // actuated this same cycle.
                        }
                    }
                }
            }
            if !self.state.mit_enable {
                return (u_t, alerts);
            }
        }

        // Mitigation mode.
        if self.regions.in_target(x.bg) || self.state.k_mit >= self.state.budget {
            if !self.regions.in_target(x.bg) {
                alerts.push(Alert {
                    t,
                    msg: ALERT_FAILURE.into(),
                });
            }
            self.state = EngineState::default();
            return (u_t, alerts);
        }

        let k = self.state.k_mit as usize;
        let expected = self
            .state
            .plan
            .as_ref()
            .map(|p| p.path[(k).min(p.path.len() - 1)]);
        let drifted = self.state.k_mit > 0
            && expected.map(|e| err(e, &x) > self.theta).unwrap_or(false);
        let exhausted = k >= self.state.actions.len();

        if drifted || exhausted {
            let remaining = self.state.budget - self.state.k_mit;
            match self.try_plan(&x, remaining, self.state.quick_mit, history.last_step(&x), t) {
                Some((plan, actions)) if !actions.is_empty() => {
                    self.state.plan = Some(plan);
                    self.state.actions = actions;
                    self.state.budget = remaining;
                    self.state.k_mit = 0;
                    alerts.push(Alert {
                        t,
                        msg: ALERT_UPDATED.into(),
                    });
                }
                _ => {
                    alerts.push(Alert {
                        t,
                        msg: ALERT_NOT_FOUND.into(),
                    });
                    if exhausted {
                        // The plan ran out without reaching the target and
                        // no replacement exists: exiting outside the target
                        // region is a mitigation failure.
                        alerts.push(Alert {
                            t,
                            msg: ALERT_FAILURE.into(),
                        });
                        self.state = EngineState::default();
                        return (u_t, alerts);
                    }
                }
            }
        }

        let k = self.state.k_mit as usize;
        let action = self.state.actions[k];
        self.state.k_mit += 1;
        (action, alerts)
    }

    /// Stealthy-attacker oracle: would this cycle raise a mitigation alarm
    /// if `u_t` were the controller's action? True whenever the engine is
    /// already mitigating.
    pub fn would_alarm(&self, x: SystemState, u_t: ControlAction, history: &History) -> bool {
        if self.state.mit_enable {
            return true;
        }
        history
            .window_with(self.short.config.window, x, u_t)
            .and_then(|(states, actions)| {
                two_level_scan(&self.short, &self.long, &states, &actions, &self.regions).ok()
            })
            .map(|(verdict, _)| verdict.hazard)
            .unwrap_or(false)
    }
}
