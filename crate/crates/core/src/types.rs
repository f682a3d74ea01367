//! Shared domain types: observable states, control actions, operating
//! regions, the transformed context space, and reachable-set bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One control cycle of the closed loop, in simulated minutes.
pub const CYCLE_MINUTES: f64 = 5.0;

/// Dimensionality of the transformed context space: (BG, IOB, dBG, dIOB).
pub const MU_DIM: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("states are not consecutive control cycles: t={prev} then t={next}")]
    NonConsecutive { prev: u32, next: u32 },
    #[error("invalid state: {0}")]
    Invalid(String),
}

/// Observable system state at one control cycle: blood glucose (mg/dL) and
/// insulin on board (U).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub bg: f64,
    pub iob: f64,
    /// Control-cycle index (one cycle = 5 simulated minutes).
    pub t: u32,
}

impl SystemState {
    pub fn new(bg: f64, iob: f64, t: u32) -> Self {
        Self { bg, iob, t }
    }

    pub fn is_valid(&self) -> bool {
        self.bg.is_finite() && self.bg > 0.0 && self.iob.is_finite() && self.iob >= 0.0
    }
}

/// High-level label of a control action relative to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    DecreaseInsulin,
    IncreaseInsulin,
    StopInsulin,
    KeepInsulin,
}

impl ActionKind {
    pub const ALL: [ActionKind; 4] = [
        ActionKind::DecreaseInsulin,
        ActionKind::IncreaseInsulin,
        ActionKind::StopInsulin,
        ActionKind::KeepInsulin,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ActionKind::DecreaseInsulin => "decrease_insulin",
            ActionKind::IncreaseInsulin => "increase_insulin",
            ActionKind::StopInsulin => "stop_insulin",
            ActionKind::KeepInsulin => "keep_insulin",
        }
    }
}

/// Insulin delivery command for one control cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    /// Delivery rate in U/h. Never negative.
    pub rate: f64,
    pub kind: ActionKind,
}

impl ControlAction {
    /// Builds an action from a raw rate, labelling it relative to the
    /// previously actuated rate.
    pub fn from_rate(rate: f64, prev_rate: f64) -> Self {
        let rate = rate.max(0.0);
        Self {
            rate,
            kind: classify_rate_change(prev_rate, rate),
        }
    }
}

/// Labels `next` relative to `prev`: stop is reserved for cutting a
/// positive rate to zero, equal rates are keep.
pub fn classify_rate_change(prev: f64, next: f64) -> ActionKind {
    if next == 0.0 && prev > 0.0 {
        ActionKind::StopInsulin
    } else if next > prev {
        ActionKind::IncreaseInsulin
    } else if next < prev {
        ActionKind::DecreaseInsulin
    } else {
        ActionKind::KeepInsulin
    }
}

/// Labels the transition between two control actions.
pub fn classify_action(prev: &ControlAction, next: &ControlAction) -> ActionKind {
    classify_rate_change(prev.rate, next.rate)
}

/// Transformed context vector mu(x) = (BG, IOB, dBG/dt, dIOB/dt), with
/// derivatives as backward differences over exactly one control cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub mu: [f64; MU_DIM],
}

impl ContextVector {
    pub fn new(bg: f64, iob: f64, d_bg: f64, d_iob: f64) -> Self {
        Self {
            mu: [bg, iob, d_bg, d_iob],
        }
    }

    pub fn bg(&self) -> f64 {
        self.mu[0]
    }
    pub fn iob(&self) -> f64 {
        self.mu[1]
    }
    pub fn d_bg(&self) -> f64 {
        self.mu[2]
    }
    pub fn d_iob(&self) -> f64 {
        self.mu[3]
    }
}

/// Builds the context vector from the last two consecutive states.
pub fn transform(prev: &SystemState, curr: &SystemState) -> Result<ContextVector, StateError> {
    if curr.t != prev.t.wrapping_add(1) {
        return Err(StateError::NonConsecutive {
            prev: prev.t,
            next: curr.t,
        });
    }
    Ok(ContextVector::new(
        curr.bg,
        curr.iob,
        curr.bg - prev.bg,
        curr.iob - prev.iob,
    ))
}

/// Operating regions of the BG state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Target,
    PossiblyHazardous,
    Hazardous,
}

/// BG-region boundaries in mg/dL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub hazard_low: f64,
    pub hazard_high: f64,
    pub target_low: f64,
    pub target_high: f64,
    pub severe_low: f64,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            hazard_low: 70.0,
            hazard_high: 180.0,
            target_low: 120.0,
            target_high: 150.0,
            severe_low: 54.0,
        }
    }
}

impl RegionSpec {
    pub fn is_ordered(&self) -> bool {
        self.severe_low < self.hazard_low
            && self.hazard_low < self.target_low
            && self.target_low < self.target_high
            && self.target_high < self.hazard_high
    }

    pub fn classify(&self, bg: f64) -> Region {
        if bg > self.hazard_high || bg < self.hazard_low {
            Region::Hazardous
        } else if bg >= self.target_low && bg <= self.target_high {
            Region::Target
        } else {
            Region::PossiblyHazardous
        }
    }

    pub fn in_target(&self, bg: f64) -> bool {
        self.classify(bg) == Region::Target
    }

    pub fn is_hazardous(&self, bg: f64) -> bool {
        self.classify(bg) == Region::Hazardous
    }

    /// Distance from a safe BG value to the nearest hazard boundary
    /// (negative inside the hazardous region).
    pub fn hazard_margin(&self, bg: f64) -> f64 {
        (bg - self.hazard_low).min(self.hazard_high - bg)
    }
}

/// Classifies a state into the region partition.
pub fn classify_region(s: &SystemState, r: &RegionSpec) -> Region {
    r.classify(s.bg)
}

/// Closed step interval for one context dimension, per control cycle.
/// Always contains zero so the zero step is reachable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimBounds {
    pub lo: f64,
    pub hi: f64,
}

impl DimBounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= 0.0 && 0.0 <= hi, "step bounds must straddle zero");
        Self { lo, hi }
    }

    /// Boundary-inclusive membership with a tolerance at floating-point
    /// noise scale, so clamped values sitting exactly on a bound are never
    /// rejected for a 1-ulp rounding error.
    pub fn contains(&self, delta: f64) -> bool {
        let eps = 1e-9 * (1.0 + self.lo.abs().max(self.hi.abs()));
        self.lo - eps <= delta && delta <= self.hi + eps
    }

    pub fn clamp(&self, delta: f64) -> f64 {
        delta.clamp(self.lo, self.hi)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lo: self.lo * factor,
            hi: self.hi * factor,
        }
    }
}

/// Per-cycle bounds on first and second differences of the observable
/// dimensions. BG rates are mg/dL per cycle, IOB rates are U per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachableSetSpec {
    pub bg_rate: DimBounds,
    pub bg_accel: DimBounds,
    pub iob_rate: DimBounds,
    pub iob_accel: DimBounds,
}

impl Default for ReachableSetSpec {
    fn default() -> Self {
        Self {
            bg_rate: DimBounds::new(-5.0, 3.0),
            bg_accel: DimBounds::new(-2.5, 2.5),
            iob_rate: DimBounds::new(-0.1, 0.1),
            iob_accel: DimBounds::new(-0.05, 0.05),
        }
    }
}

impl ReachableSetSpec {
    /// Per-dimension step bounds in mu order (BG, IOB, dBG, dIOB). A one
    /// cycle step in the derivative dimensions is a second difference of
    /// the underlying state, so those dimensions carry the accel bounds.
    pub fn mu_bounds(&self) -> [DimBounds; MU_DIM] {
        [self.bg_rate, self.iob_rate, self.bg_accel, self.iob_accel]
    }

    /// Widens every interval by `factor` (loose constraints for quick
    /// mitigation).
    pub fn widened(&self, factor: f64) -> Self {
        Self {
            bg_rate: self.bg_rate.scaled(factor),
            bg_accel: self.bg_accel.scaled(factor),
            iob_rate: self.iob_rate.scaled(factor),
            iob_accel: self.iob_accel.scaled(factor),
        }
    }
}

/// True iff `candidate` lies in the one-cycle reachable box around
/// `current`, dimension by dimension and boundary inclusive.
pub fn reachable_contains(
    current: &ContextVector,
    candidate: &ContextVector,
    spec: &ReachableSetSpec,
) -> bool {
    let bounds = spec.mu_bounds();
    current
        .mu
        .iter()
        .zip(candidate.mu.iter())
        .zip(bounds.iter())
        .all(|((cur, cand), b)| b.contains(cand - cur))
}

/// Euclidean projection of `predicted_next` onto the reachable box around
/// `current`. For an axis-aligned box the argmin is the per-dimension clamp,
/// so the result equals `predicted_next` whenever it is already reachable.
pub fn nearest_reachable(
    current: &ContextVector,
    predicted_next: &ContextVector,
    spec: &ReachableSetSpec,
) -> ContextVector {
    let bounds = spec.mu_bounds();
    let mut mu = [0.0; MU_DIM];
    for i in 0..MU_DIM {
        mu[i] = current.mu[i] + bounds[i].clamp(predicted_next.mu[i] - current.mu[i]);
    }
    ContextVector { mu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn region_boundaries() {
        let r = RegionSpec::default();
        assert!(r.is_ordered());
        assert_eq!(r.classify(185.0), Region::Hazardous);
        assert_eq!(r.classify(65.0), Region::Hazardous);
        assert_eq!(r.classify(130.0), Region::Target);
        assert_eq!(r.classify(100.0), Region::PossiblyHazardous);
        // Boundary values: 180 and 70 are not hazardous, 120 and 150 are target.
        assert_eq!(r.classify(180.0), Region::PossiblyHazardous);
        assert_eq!(r.classify(70.0), Region::PossiblyHazardous);
        assert_eq!(r.classify(120.0), Region::Target);
        assert_eq!(r.classify(150.0), Region::Target);
    }

    #[test]
    fn transform_backward_difference() {
        let prev = SystemState::new(117.0, 2.0, 10);
        let curr = SystemState::new(120.0, 2.0, 11);
        let ctx = transform(&prev, &curr).unwrap();
        assert_eq!(ctx.mu, [120.0, 2.0, 3.0, 0.0]);

        let same = transform(&curr, &SystemState::new(120.0, 2.0, 12)).unwrap();
        assert_eq!(same.d_bg(), 0.0);
        assert_eq!(same.d_iob(), 0.0);
    }

    #[test]
    fn transform_rejects_non_consecutive() {
        let a = SystemState::new(100.0, 1.0, 5);
        let b = SystemState::new(101.0, 1.0, 7);
        assert!(matches!(
            transform(&a, &b),
            Err(StateError::NonConsecutive { prev: 5, next: 7 })
        ));
    }

    #[test]
    fn fast_drop_is_flagged_unreachable() {
        // A -6 mg/dL per-cycle drop is outside the default [-5, 3] band.
        let prev = SystemState::new(120.0, 1.0, 0);
        let curr = SystemState::new(114.0, 1.0, 1);
        let base = ContextVector::new(120.0, 1.0, 0.0, 0.0);
        let ctx = transform(&prev, &curr).unwrap();
        assert_eq!(ctx.d_bg(), -6.0);
        assert!(!reachable_contains(
            &base,
            &ContextVector::new(base.bg() + ctx.d_bg(), 1.0, 0.0, 0.0),
            &ReachableSetSpec::default()
        ));
    }

    #[test]
    fn reachable_boundary_inclusive() {
        let spec = ReachableSetSpec::default();
        let cur = ContextVector::new(120.0, 1.0, 0.0, 0.0);
        let up3 = ContextVector::new(123.0, 1.0, 0.0, 0.0);
        let up4 = ContextVector::new(124.0, 1.0, 0.0, 0.0);
        assert!(reachable_contains(&cur, &up3, &spec));
        assert!(!reachable_contains(&cur, &up4, &spec));
        assert!(reachable_contains(&cur, &cur, &spec));
    }

    #[test]
    fn classify_action_cases() {
        let a = |rate: f64, prev: f64| ControlAction::from_rate(rate, prev);
        let base = a(1.0, 1.0);
        assert_eq!(classify_action(&base, &a(0.0, 1.0)), ActionKind::StopInsulin);
        assert_eq!(classify_action(&base, &a(1.0, 1.0)), ActionKind::KeepInsulin);
        assert_eq!(
            classify_action(&base, &a(1.5, 1.0)),
            ActionKind::IncreaseInsulin
        );
        assert_eq!(
            classify_action(&base, &a(0.5, 1.0)),
            ActionKind::DecreaseInsulin
        );
        // Zero to zero is keep, not stop.
        let zero = a(0.0, 0.0);
        assert_eq!(classify_action(&zero, &a(0.0, 0.0)), ActionKind::KeepInsulin);
    }

    /// Brute-force oracle: minimize Euclidean distance over a fine grid of
    /// the reachable box, then confirm the clamp lands at least as close.
    fn brute_force_nearest(
        current: &ContextVector,
        predicted: &ContextVector,
        spec: &ReachableSetSpec,
    ) -> ContextVector {
        let bounds = spec.mu_bounds();
        let steps = 40;
        let mut best = *current;
        let mut best_d = f64::INFINITY;
        let mut idx = [0usize; MU_DIM];
        loop {
            let mut mu = [0.0; MU_DIM];
            for d in 0..MU_DIM {
                let frac = idx[d] as f64 / steps as f64;
                mu[d] = current.mu[d] + bounds[d].lo + frac * (bounds[d].hi - bounds[d].lo);
            }
            let dist: f64 = mu
                .iter()
                .zip(predicted.mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = ContextVector { mu };
            }
            // odometer increment
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == MU_DIM {
                    return best;
                }
            }
        }
    }

    #[test]
    fn nearest_reachable_matches_brute_force() {
        let spec = ReachableSetSpec::default();
        // Frozen from the grid oracle: ΔBG=+7 clamps to +3, other dims hit
        // their own bounds independently.
        let cur = ContextVector::new(0.0, 1.0, 0.0, 0.0);
        let pred = ContextVector::new(7.0, 1.05, -4.0, 0.2);
        let nearest = nearest_reachable(&cur, &pred, &spec);
        assert_eq!(nearest.mu, [3.0, 1.05, -2.5, 0.05]);

        let brute = brute_force_nearest(&cur, &pred, &spec);
        let d_clamp: f64 = nearest
            .mu
            .iter()
            .zip(pred.mu.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let d_brute: f64 = brute
            .mu
            .iter()
            .zip(pred.mu.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(d_clamp <= d_brute + 1e-9);
    }

    #[test]
    fn nearest_reachable_interior_is_identity() {
        let spec = ReachableSetSpec::default();
        let cur = ContextVector::new(120.0, 1.0, 1.0, 0.0);
        let pred = ContextVector::new(122.0, 1.02, 0.5, 0.01);
        assert_eq!(nearest_reachable(&cur, &pred, &spec), pred);
    }

    proptest! {
        #[test]
        fn regions_partition_positive_bg(bg in 0.01f64..500.0) {
            let r = RegionSpec::default();
            // classify is total; exactly one region.
            let _ = r.classify(bg);
        }

        #[test]
        fn zero_step_always_reachable(
            bg in 20.0f64..400.0,
            iob in 0.0f64..10.0,
            dbg in -20.0f64..20.0,
            diob in -1.0f64..1.0,
        ) {
            let c = ContextVector::new(bg, iob, dbg, diob);
            prop_assert!(reachable_contains(&c, &c, &ReachableSetSpec::default()));
        }

        #[test]
        fn nearest_output_is_reachable(
            bg in 20.0f64..400.0,
            iob in 0.0f64..10.0,
            pbg in -50.0f64..450.0,
            piob in -5.0f64..15.0,
            pdbg in -30.0f64..30.0,
            pdiob in -2.0f64..2.0,
        ) {
            let spec = ReachableSetSpec::default();
            let cur = ContextVector::new(bg, iob, 0.0, 0.0);
            let pred = ContextVector::new(pbg, piob, pdbg, pdiob);
            let near = nearest_reachable(&cur, &pred, &spec);
            prop_assert!(reachable_contains(&cur, &near, &spec));
        }

        #[test]
        fn transform_reverse_step_reconstructs(
            bg0 in 40.0f64..300.0,
            bg1 in 40.0f64..300.0,
            iob0 in 0.0f64..8.0,
            iob1 in 0.0f64..8.0,
        ) {
            let prev = SystemState::new(bg0, iob0, 3);
            let curr = SystemState::new(bg1, iob1, 4);
            let ctx = transform(&prev, &curr).unwrap();
            prop_assert!((ctx.bg() - ctx.d_bg() - bg0).abs() < 1e-12);
            prop_assert!((ctx.iob() - ctx.d_iob() - iob0).abs() < 1e-12);
        }
    }
}
