//! Hazard mitigation specification: STL rules mapping a system context to
//! the corrective actions that must be initiated within a time budget,
//! plus trace checking and the rule-based mitigation baseline.
//!
//! Only the fragment needed here is supported: a conjunction of atomic
//! inequalities over the context vector, held since entry, with an
//! eventually-within-`t_s` obligation on the action, globally over the
//! trace.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::types::{ActionKind, ContextVector, ControlAction, MU_DIM};

/// Tolerance for `= 0` predicates on derivative entries; exact float
/// equality would never fire.
pub const EQ_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum HmsError {
    #[error("predicate references context dimension {0}, only {MU_DIM} exist")]
    UnknownDimension(usize),
    #[error("rule {0}: {1}")]
    InvalidRule(String, String),
    #[error("rule file: {0}")]
    Parse(String),
}

/// Named context dimensions, in mu order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuVar {
    Bg,
    Iob,
    BgRate,
    IobRate,
}

impl MuVar {
    pub fn index(&self) -> usize {
        match self {
            MuVar::Bg => 0,
            MuVar::Iob => 1,
            MuVar::BgRate => 2,
            MuVar::IobRate => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

/// One atomic inequality `mu_i ~ beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomicPredicate {
    pub var: MuVar,
    pub op: CmpOp,
    pub beta: f64,
}

impl AtomicPredicate {
    pub fn eval(&self, ctx: &ContextVector) -> bool {
        let v = ctx.mu[self.var.index()];
        match self.op {
            CmpOp::Lt => v < self.beta,
            CmpOp::Le => v <= self.beta,
            CmpOp::Gt => v > self.beta,
            CmpOp::Ge => v >= self.beta,
            CmpOp::Eq => (v - self.beta).abs() < EQ_TOLERANCE,
        }
    }
}

/// Permitted or forbidden corrective action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub kind: ActionKind,
    /// True for negated entries (the action must NOT be taken).
    #[serde(default)]
    pub negated: bool,
}

impl ActionSpec {
    pub fn permit(kind: ActionKind) -> Self {
        Self {
            kind,
            negated: false,
        }
    }
    pub fn forbid(kind: ActionKind) -> Self {
        Self {
            kind,
            negated: true,
        }
    }
}

/// One mitigation rule: when the context conjunction holds, one of the
/// permitted actions must be initiated within `t_s` cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmsRule {
    pub id: String,
    pub context: Vec<AtomicPredicate>,
    pub actions: Vec<ActionSpec>,
    /// Latest-initiation budget, cycles.
    pub t_s: u32,
}

impl HmsRule {
    pub fn validate(&self) -> Result<(), HmsError> {
        if self.context.is_empty() {
            return Err(HmsError::InvalidRule(self.id.clone(), "empty context".into()));
        }
        if self.actions.is_empty() {
            return Err(HmsError::InvalidRule(self.id.clone(), "empty action set".into()));
        }
        if self.t_s < 1 {
            return Err(HmsError::InvalidRule(self.id.clone(), "t_s must be >= 1".into()));
        }
        Ok(())
    }

    pub fn permitted(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.actions.iter().filter(|a| !a.negated).map(|a| a.kind)
    }

    pub fn forbidden(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.actions.iter().filter(|a| a.negated).map(|a| a.kind)
    }

    /// True when an action kind discharges this rule's obligation: it is
    /// one of the permitted kinds and not a forbidden one. For
    /// forbid-only rules any non-forbidden action complies.
    pub fn complies(&self, kind: ActionKind) -> bool {
        if self.forbidden().any(|k| k == kind) {
            return false;
        }
        let mut permitted = self.permitted().peekable();
        if permitted.peek().is_none() {
            return true;
        }
        permitted.any(|k| k == kind)
    }
}

/// True iff every atomic predicate of the rule holds for the context.
pub fn match_context(rule: &HmsRule, ctx: &ContextVector) -> bool {
    rule.context.iter().all(|p| p.eval(ctx))
}

/// Action kinds required and excluded by the rules matching a context.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequiredActions {
    pub permitted: BTreeSet<ActionKind>,
    pub forbidden: BTreeSet<ActionKind>,
    /// True when a matched rule permitted a kind another matched rule
    /// forbids. The forbidden set wins in `permitted`.
    pub conflict: bool,
}

impl RequiredActions {
    pub fn is_empty(&self) -> bool {
        self.permitted.is_empty() && self.forbidden.is_empty()
    }
}

/// Union of matched rules' permitted actions minus anything any matched
/// rule forbids.
pub fn required_actions(rules: &[HmsRule], ctx: &ContextVector) -> RequiredActions {
    let mut permitted = BTreeSet::new();
    let mut forbidden = BTreeSet::new();
    for rule in rules.iter().filter(|r| match_context(r, ctx)) {
        permitted.extend(rule.permitted());
        forbidden.extend(rule.forbidden());
    }
    let conflict = permitted.intersection(&forbidden).next().is_some();
    let permitted = permitted.difference(&forbidden).copied().collect();
    RequiredActions {
        permitted,
        forbidden,
        conflict,
    }
}

/// Outcome of checking one rule over a finite trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceVerdict {
    pub satisfied: bool,
    /// Index where the context entered without a compliant action inside
    /// the `t_s` window.
    pub first_violation: Option<usize>,
}

/// Checks the rule over a finite trace of (context, actuated action)
/// pairs: at each index where the context becomes matched (entry after an
/// unmatched index, or trace start), a compliant action must occur within
/// `t_s` cycles of the entry, no later than the end of the trace.
pub fn evaluate_trace(rule: &HmsRule, trace: &[(ContextVector, ControlAction)]) -> TraceVerdict {
    let matched: Vec<bool> = trace.iter().map(|(c, _)| match_context(rule, c)).collect();
    for i in 0..trace.len() {
        let entered = matched[i] && (i == 0 || !matched[i - 1]);
        if !entered {
            continue;
        }
        let window_end = (i + rule.t_s as usize).min(trace.len() - 1);
        let discharged = (i..=window_end).any(|j| rule.complies(trace[j].1.kind));
        if !discharged {
            return TraceVerdict {
                satisfied: false,
                first_violation: Some(i),
            };
        }
    }
    TraceVerdict {
        satisfied: true,
        first_violation: None,
    }
}

/// Fixed multipliers for the rule-based baseline: the HMS names an action
/// kind but no magnitude, so the baseline scales the proposed rate.
pub const INCREASE_FACTOR: f64 = 1.5;
pub const DECREASE_FACTOR: f64 = 0.5;

/// Deterministic kind preference when several are permitted. Stopping or
/// reducing delivery is ordered first: the irreversible harm direction in
/// this plant is over-delivery.
const KIND_PRIORITY: [ActionKind; 4] = [
    ActionKind::StopInsulin,
    ActionKind::DecreaseInsulin,
    ActionKind::IncreaseInsulin,
    ActionKind::KeepInsulin,
];

/// Rule-based mitigation: when any rule matches, replace the proposed
/// action with a fixed-magnitude action of a permitted kind, respecting
/// the forbidden set; otherwise pass the proposal through.
pub fn rule_based_mitigate(
    ctx: &ContextVector,
    rules: &[HmsRule],
    proposed: &ControlAction,
    cfg: &ControllerConfig,
) -> ControlAction {
    let req = required_actions(rules, ctx);
    if req.is_empty() {
        return *proposed;
    }

    let chosen = KIND_PRIORITY.iter().find(|k| req.permitted.contains(k));
    match chosen {
        Some(ActionKind::StopInsulin) => ControlAction::from_rate(0.0, proposed.rate),
        Some(ActionKind::DecreaseInsulin) => {
            ControlAction::from_rate(proposed.rate * DECREASE_FACTOR, proposed.rate)
        }
        Some(ActionKind::IncreaseInsulin) => {
            // Scaling zero stays zero, so raise from the basal rate instead.
            let base = if proposed.rate > 0.0 {
                proposed.rate * INCREASE_FACTOR
            } else {
                cfg.basal_rate
            };
            ControlAction::from_rate(base.min(cfg.max_rate), proposed.rate)
        }
        Some(ActionKind::KeepInsulin) | None => {
            // Forbid-only match (or nothing actionable): veto a forbidden
            // proposal, otherwise pass through.
            if req.forbidden.contains(&proposed.kind) {
                let fallback = if proposed.kind == ActionKind::StopInsulin {
                    cfg.basal_rate
                } else {
                    proposed.rate
                };
                ControlAction::from_rate(fallback, proposed.rate)
            } else {
                *proposed
            }
        }
    }
}

/// The ten default mitigation rules. Threshold defaults: IOB bounds of
/// 1.0 U on the hyperglycemia side, 2.0 U on the hypoglycemia side, 0.5 U
/// for the stop-veto rule, and an 80 mg/dL hard-stop floor. BGT = 120.
pub fn default_rules() -> Vec<HmsRule> {
    use ActionKind::*;
    use CmpOp::*;
    use MuVar::*;
    let p = |var, op, beta| AtomicPredicate { var, op, beta };
    let bgt = 120.0;

    vec![
        HmsRule {
            id: "rule-1".into(),
            context: vec![p(Bg, Gt, bgt), p(BgRate, Gt, 0.0), p(IobRate, Lt, 0.0), p(Iob, Lt, 1.0)],
            actions: vec![ActionSpec::permit(IncreaseInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-2".into(),
            context: vec![p(Bg, Gt, bgt), p(BgRate, Gt, 0.0), p(IobRate, Eq, 0.0), p(Iob, Lt, 1.0)],
            actions: vec![ActionSpec::permit(IncreaseInsulin), ActionSpec::permit(KeepInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-3".into(),
            context: vec![p(Bg, Gt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Gt, 0.0), p(Iob, Lt, 1.0)],
            actions: vec![ActionSpec::permit(IncreaseInsulin), ActionSpec::permit(KeepInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-4".into(),
            context: vec![p(Bg, Gt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Lt, 0.0), p(Iob, Lt, 1.0)],
            actions: vec![ActionSpec::permit(IncreaseInsulin), ActionSpec::permit(KeepInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-5".into(),
            context: vec![p(Bg, Gt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Eq, 0.0), p(Iob, Lt, 1.0)],
            actions: vec![ActionSpec::permit(IncreaseInsulin), ActionSpec::permit(KeepInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-6".into(),
            context: vec![p(Bg, Lt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Gt, 0.0), p(Iob, Gt, 2.0)],
            actions: vec![ActionSpec::permit(StopInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-7".into(),
            context: vec![p(Bg, Lt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Lt, 0.0), p(Iob, Gt, 2.0)],
            actions: vec![ActionSpec::permit(DecreaseInsulin), ActionSpec::permit(StopInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-8".into(),
            context: vec![p(Bg, Lt, bgt), p(BgRate, Lt, 0.0), p(IobRate, Eq, 0.0), p(Iob, Gt, 2.0)],
            actions: vec![ActionSpec::permit(DecreaseInsulin), ActionSpec::permit(StopInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-9".into(),
            context: vec![p(Bg, Gt, bgt), p(Iob, Lt, 0.5)],
            actions: vec![ActionSpec::forbid(StopInsulin)],
            t_s: 3,
        },
        HmsRule {
            id: "rule-10".into(),
            context: vec![p(Bg, Lt, 80.0)],
            actions: vec![ActionSpec::permit(StopInsulin)],
            t_s: 3,
        },
    ]
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleFile {
    rules: Vec<HmsRule>,
}

/// Loads rules from the TOML rule file (columns: id, context predicates,
/// actions, t_s).
pub fn load_rules(toml_text: &str) -> Result<Vec<HmsRule>, HmsError> {
    let file: RuleFile = toml::from_str(toml_text).map_err(|e| HmsError::Parse(e.to_string()))?;
    for r in &file.rules {
        r.validate()?;
    }
    Ok(file.rules)
}

pub fn rules_to_toml(rules: &[HmsRule]) -> String {
    toml::to_string_pretty(&RuleFile {
        rules: rules.to_vec(),
    })
    .expect("rules serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ContextVector;

    fn ctx(bg: f64, iob: f64, d_bg: f64, d_iob: f64) -> ContextVector {
        ContextVector::new(bg, iob, d_bg, d_iob)
    }

    fn rules() -> Vec<HmsRule> {
        default_rules()
    }

    #[test]
    fn rule_1_matches_rising_bg_with_low_falling_iob() {
        let rules = rules();
        let c = ctx(160.0, 0.5, 2.0, -0.05);
        assert!(match_context(&rules[0], &c));
        let req = required_actions(&rules, &c);
        assert!(req.permitted.contains(&ActionKind::IncreaseInsulin));
    }

    #[test]
    fn rule_10_matches_low_bg() {
        // Rule instantiated with beta_10 = 60 for this check.
        let rule = HmsRule {
            id: "rule-10-local".into(),
            context: vec![AtomicPredicate {
                var: MuVar::Bg,
                op: CmpOp::Lt,
                beta: 60.0,
            }],
            actions: vec![ActionSpec::permit(ActionKind::StopInsulin)],
            t_s: 3,
        };
        assert!(match_context(&rule, &ctx(50.0, 1.0, 0.0, 0.0)));
        assert!(!match_context(&rule, &ctx(60.0, 1.0, 0.0, 0.0)));
    }

    #[test]
    fn bgt_boundary_is_strict() {
        let rules = rules();
        let at_target = ctx(120.0, 0.5, 2.0, -0.05);
        for r in &rules[..5] {
            assert!(!match_context(r, &at_target), "{} matched at BG=BGT", r.id);
        }
    }

    #[test]
    fn rule_9_forbids_stop() {
        let rules = rules();
        let c = ctx(160.0, 0.2, 0.5, 0.0005);
        let req = required_actions(&rules, &c);
        assert!(req.forbidden.contains(&ActionKind::StopInsulin));
    }

    #[test]
    fn rule_2_permits_increase_or_keep() {
        let rules = rules();
        let c = ctx(160.0, 0.5, 2.0, 0.0);
        assert!(match_context(&rules[1], &c));
        let req = required_actions(&rules, &c);
        assert!(req.permitted.contains(&ActionKind::IncreaseInsulin));
        assert!(req.permitted.contains(&ActionKind::KeepInsulin));
    }

    #[test]
    fn no_match_yields_empty_sets() {
        let rules = rules();
        let c = ctx(130.0, 1.5, 0.5, 0.0);
        let req = required_actions(&rules, &c);
        assert!(req.is_empty());
        assert!(!req.conflict);
    }

    #[test]
    fn conflict_resolution_removes_forbidden() {
        let mk = |actions: Vec<ActionSpec>| HmsRule {
            id: "x".into(),
            context: vec![AtomicPredicate {
                var: MuVar::Bg,
                op: CmpOp::Gt,
                beta: 0.0,
            }],
            actions,
            t_s: 1,
        };
        let rules = vec![
            mk(vec![ActionSpec::permit(ActionKind::StopInsulin)]),
            mk(vec![ActionSpec::forbid(ActionKind::StopInsulin)]),
        ];
        let req = required_actions(&rules, &ctx(100.0, 0.0, 0.0, 0.0));
        assert!(req.conflict);
        assert!(!req.permitted.contains(&ActionKind::StopInsulin));
    }

    #[test]
    fn iob_rate_equality_uses_tolerance() {
        let rules = rules();
        let c = ctx(160.0, 0.5, 2.0, 0.0009);
        assert!(match_context(&rules[1], &c));
        let c2 = ctx(160.0, 0.5, 2.0, 0.002);
        assert!(!match_context(&rules[1], &c2));
    }

    fn action(kind: ActionKind) -> ControlAction {
        let (prev, rate) = match kind {
            ActionKind::StopInsulin => (1.0, 0.0),
            ActionKind::IncreaseInsulin => (1.0, 1.5),
            ActionKind::DecreaseInsulin => (1.0, 0.5),
            ActionKind::KeepInsulin => (1.0, 1.0),
        };
        ControlAction::from_rate(rate, prev)
    }

    fn simple_rule(t_s: u32) -> HmsRule {
        HmsRule {
            id: "test".into(),
            context: vec![AtomicPredicate {
                var: MuVar::Bg,
                op: CmpOp::Gt,
                beta: 150.0,
            }],
            actions: vec![ActionSpec::permit(ActionKind::IncreaseInsulin)],
            t_s,
        }
    }

    #[test]
    fn trace_satisfied_within_window() {
        let rule = simple_rule(3);
        let mut trace = vec![(ctx(140.0, 0.0, 0.0, 0.0), action(ActionKind::KeepInsulin)); 10];
        for item in trace.iter_mut().skip(5) {
            item.0 = ctx(160.0, 0.0, 0.0, 0.0);
        }
        // Context enters at 5; a permitted action at 5 + t_s - 1 = 7 is in time.
        trace[7].1 = action(ActionKind::IncreaseInsulin);
        let v = evaluate_trace(&rule, &trace);
        assert!(v.satisfied);
    }

    #[test]
    fn trace_violated_without_action() {
        let rule = simple_rule(3);
        let mut trace = vec![(ctx(140.0, 0.0, 0.0, 0.0), action(ActionKind::KeepInsulin)); 15];
        for item in trace.iter_mut().skip(10) {
            item.0 = ctx(160.0, 0.0, 0.0, 0.0);
        }
        let v = evaluate_trace(&rule, &trace);
        assert!(!v.satisfied);
        assert_eq!(v.first_violation, Some(10));
    }

    /// Brute-force semantics: enumerate every context-entry index directly
    /// from the matched bitmap and scan its full window.
    fn brute_force(rule: &HmsRule, trace: &[(ContextVector, ControlAction)]) -> TraceVerdict {
        let n = trace.len();
        for i in 0..n {
            let m_here = match_context(rule, &trace[i].0);
            let m_prev = i > 0 && match_context(rule, &trace[i - 1].0);
            if m_here && !m_prev {
                let mut ok = false;
                for j in i..n.min(i + rule.t_s as usize + 1) {
                    if rule.complies(trace[j].1.kind) {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return TraceVerdict {
                        satisfied: false,
                        first_violation: Some(i),
                    };
                }
            }
        }
        TraceVerdict {
            satisfied: true,
            first_violation: None,
        }
    }

    #[test]
    fn random_traces_agree_with_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rule = simple_rule(2);
        for _ in 0..500 {
            let len = rng.gen_range(1..20);
            let trace: Vec<(ContextVector, ControlAction)> = (0..len)
                .map(|_| {
                    let bg = if rng.gen_bool(0.5) { 160.0 } else { 140.0 };
                    let kind = match rng.gen_range(0..3) {
                        0 => ActionKind::IncreaseInsulin,
                        1 => ActionKind::KeepInsulin,
                        _ => ActionKind::StopInsulin,
                    };
                    (ctx(bg, 0.0, 0.0, 0.0), action(kind))
                })
                .collect();
            assert_eq!(evaluate_trace(&rule, &trace), brute_force(&rule, &trace));
        }
    }

    #[test]
    fn mitigate_rule_10_stops_delivery() {
        let rules = rules();
        let cfg = ControllerConfig::default();
        let proposed = ControlAction::from_rate(1.2, 1.0);
        let out = rule_based_mitigate(&ctx(75.0, 0.5, -2.0, 0.0), &rules, &proposed, &cfg);
        assert_eq!(out.rate, 0.0);
    }

    #[test]
    fn mitigate_no_match_passes_through() {
        let rules = rules();
        let cfg = ControllerConfig::default();
        let proposed = ControlAction::from_rate(1.2, 1.0);
        let out = rule_based_mitigate(&ctx(130.0, 1.5, 0.5, 0.0), &rules, &proposed, &cfg);
        assert_eq!(out, proposed);
    }

    #[test]
    fn mitigate_rule_1_scales_rate_up() {
        let rules = rules();
        let cfg = ControllerConfig::default();
        let proposed = ControlAction::from_rate(1.0, 1.0);
        let out = rule_based_mitigate(&ctx(160.0, 0.6, 2.0, -0.05), &rules, &proposed, &cfg);
        assert_eq!(out.rate, 1.5);
        assert_eq!(out.kind, ActionKind::IncreaseInsulin);
    }

    #[test]
    fn mitigate_rule_9_vetoes_stop() {
        let rules = rules();
        let cfg = ControllerConfig::default();
        let proposed = ControlAction::from_rate(0.0, 1.0);
        assert_eq!(proposed.kind, ActionKind::StopInsulin);
        let out = rule_based_mitigate(&ctx(160.0, 0.2, 0.5, 0.0005), &rules, &proposed, &cfg);
        assert!(out.rate > 0.0, "stop must be vetoed under rule 9");
    }

    #[test]
    fn required_actions_never_contains_forbidden_kind() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rules = rules();
        for _ in 0..2000 {
            let c = ctx(
                rng.gen_range(40.0..250.0),
                rng.gen_range(0.0..4.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-0.2..0.2),
            );
            let req = required_actions(&rules, &c);
            assert!(req.permitted.intersection(&req.forbidden).next().is_none());
        }
    }

    #[test]
    fn beta_monotonicity_for_less_than_predicates() {
        // If IOB < beta matched, it still matches for any larger beta.
        let mk = |beta| HmsRule {
            id: "m".into(),
            context: vec![AtomicPredicate {
                var: MuVar::Iob,
                op: CmpOp::Lt,
                beta,
            }],
            actions: vec![ActionSpec::permit(ActionKind::KeepInsulin)],
            t_s: 1,
        };
        for iob in [0.0, 0.3, 0.9, 0.999] {
            let c = ctx(100.0, iob, 0.0, 0.0);
            if match_context(&mk(1.0), &c) {
                assert!(match_context(&mk(1.5), &c));
                assert!(match_context(&mk(10.0), &c));
            }
        }
    }

    #[test]
    fn rules_round_trip_through_toml() {
        let rules = rules();
        let text = rules_to_toml(&rules);
        let back = load_rules(&text).unwrap();
        assert_eq!(rules, back);
    }

    #[test]
    fn invalid_rules_rejected() {
        let mut r = simple_rule(3);
        r.context.clear();
        assert!(r.validate().is_err());
        let mut r2 = simple_rule(3);
        r2.actions.clear();
        assert!(r2.validate().is_err());
    }
}
