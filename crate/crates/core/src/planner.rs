//! Safety-constrained RRT* mitigation path planning in the (BG, IOB)
//! state space, plus the unconstrained baseline and the path checker used
//! for the satisfaction-rate metric.
//!
//! Each tree edge spans exactly one control cycle, so a path's length in
//! edges is its time to mitigate. A candidate edge is accepted only if it
//! satisfies the per-cycle first-derivative bounds, the second-derivative
//! bounds against the parent edge, keeps clear of the hazardous region,
//! and stays within the recovery budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{RegionSpec, ReachableSetSpec};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("no mitigation path found after {trials} trials")]
    PathNotFound { trials: usize },
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
}

/// Per-dimension sampling box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleBounds {
    pub bg: (f64, f64),
    pub iob: (f64, f64),
}

impl Default for SampleBounds {
    fn default() -> Self {
        Self {
            bg: (50.0, 320.0),
            iob: (0.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Sampling iterations.
    pub k_max: usize,
    /// Incremental step per dimension (BG mg/dL, IOB U).
    pub delta_x: (f64, f64),
    /// Near radius in step-scaled units.
    pub gamma: f64,
    /// Recovery budget: maximum path length in cycles, exclusive.
    pub budget: u32,
    /// Widen the derivative bounds for fast mitigation.
    pub quick_mit: bool,
    /// Widening factor applied under `quick_mit`.
    pub quick_factor: f64,
    pub constraints: ReachableSetSpec,
    pub regions: RegionSpec,
    pub sample_bounds: SampleBounds,
    /// Fraction of samples drawn from the target region.
    pub goal_bias: f64,
    /// Observed (dBG, dIOB) of the cycle before planning started; anchors
    /// the second-derivative check for the first edge.
    pub prev_step: (f64, f64),
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            k_max: 2000,
            delta_x: (3.0, 0.1),
            gamma: 2.0,
            budget: 24,
            quick_mit: false,
            quick_factor: 2.0,
            constraints: ReachableSetSpec::default(),
            regions: RegionSpec::default(),
            sample_bounds: SampleBounds::default(),
            goal_bias: 0.1,
            prev_step: (0.0, 0.0),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.k_max < 1 {
            return Err(PlanError::InvalidConfig("k_max must be >= 1".into()));
        }
        if self.budget < 1 {
            return Err(PlanError::InvalidConfig("budget must be >= 1".into()));
        }
        if !(self.delta_x.0 > 0.0 && self.delta_x.1 > 0.0) {
            return Err(PlanError::InvalidConfig("delta_x must be positive".into()));
        }
        Ok(())
    }

    /// Constraint set in force for this plan (widened under quick_mit).
    pub fn effective_constraints(&self) -> ReachableSetSpec {
        if self.quick_mit {
            self.constraints.widened(self.quick_factor)
        } else {
            self.constraints
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanVertex {
    pub bg: f64,
    pub iob: f64,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub vertices: Vec<PlanVertex>,
    pub optimal_goal: usize,
    /// States from the initial configuration to the goal, inclusive.
    pub path: Vec<(f64, f64)>,
    /// Path length in cycles (edges).
    pub ttmh: u32,
    /// Iteration at which the first goal vertex appeared.
    pub conv_trials: usize,
}

struct Tree {
    vertices: Vec<PlanVertex>,
    children: Vec<Vec<usize>>,
}

impl Tree {
    fn new(root: (f64, f64)) -> Self {
        Self {
            vertices: vec![PlanVertex {
                bg: root.0,
                iob: root.1,
                parent: None,
            }],
            children: vec![Vec::new()],
        }
    }

    fn point(&self, i: usize) -> (f64, f64) {
        (self.vertices[i].bg, self.vertices[i].iob)
    }

    /// Cost as depth in edges, derived from parent links so rewiring can
    /// never leave a stale value behind.
    fn cost(&self, mut i: usize) -> u32 {
        let mut c = 0;
        while let Some(p) = self.vertices[i].parent {
            c += 1;
            i = p;
        }
        c
    }

    /// Incoming edge of vertex `i`, or the pre-plan observed step for the
    /// root.
    fn incoming_step(&self, i: usize, prev_step: (f64, f64)) -> (f64, f64) {
        match self.vertices[i].parent {
            None => prev_step,
            Some(p) => {
                let (bg, iob) = self.point(i);
                let (pbg, piob) = self.point(p);
                (bg - pbg, iob - piob)
            }
        }
    }

    fn add(&mut self, point: (f64, f64), parent: usize) -> usize {
        let idx = self.vertices.len();
        self.vertices.push(PlanVertex {
            bg: point.0,
            iob: point.1,
            parent: Some(parent),
        });
        self.children.push(Vec::new());
        self.children[parent].push(idx);
        idx
    }

    fn reparent(&mut self, child: usize, new_parent: usize) {
        let old = self.vertices[child].parent.expect("root is never rewired");
        self.children[old].retain(|&c| c != child);
        self.children[new_parent].push(child);
        self.vertices[child].parent = Some(new_parent);
    }
}

fn scaled_dist(a: (f64, f64), b: (f64, f64), delta: (f64, f64)) -> f64 {
    let d0 = (a.0 - b.0) / delta.0;
    let d1 = (a.1 - b.1) / delta.1;
    (d0 * d0 + d1 * d1).sqrt()
}

/// First-derivative (rate) bounds on one edge.
fn rate_ok(step: (f64, f64), c: &ReachableSetSpec) -> bool {
    c.bg_rate.contains(step.0) && c.iob_rate.contains(step.1)
}

/// Second-derivative bounds of one edge against the step before it.
fn accel_ok(prev: (f64, f64), step: (f64, f64), c: &ReachableSetSpec) -> bool {
    c.bg_accel.contains(step.0 - prev.0) && c.iob_accel.contains(step.1 - prev.1)
}

/// Largest move toward `desired` satisfying both the rate interval and the
/// accel interval around the previous step. The `dx` cap is a search
/// heuristic only, dropped when it would empty the interval (extreme entry
/// derivatives need steps beyond the nominal increment).
fn feasible_step_1d(
    rate: crate::types::DimBounds,
    accel: crate::types::DimBounds,
    prev: f64,
    dx: f64,
    desired: f64,
) -> Option<f64> {
    let lo = rate.lo.max(prev + accel.lo);
    let hi = rate.hi.min(prev + accel.hi);
    if lo > hi {
        return None;
    }
    let (clo, chi) = (lo.max(-dx), hi.min(dx));
    let (lo, hi) = if clo <= chi { (clo, chi) } else { (lo, hi) };
    Some(desired.clamp(lo, hi))
}

struct EdgeChecker {
    constraints: ReachableSetSpec,
    regions: RegionSpec,
    budget: u32,
    constrained: bool,
    prev_step: (f64, f64),
}

impl EdgeChecker {
    /// One steering increment from vertex `from` toward `sample`. The
    /// constrained planner shapes the step into the feasible set of its
    /// parent edge; the baseline clamps to the increment box only.
    fn steer(
        &self,
        tree: &Tree,
        from: usize,
        sample: (f64, f64),
        delta_x: (f64, f64),
    ) -> Option<(f64, f64)> {
        let (fbg, fiob) = tree.point(from);
        let desired = (sample.0 - fbg, sample.1 - fiob);
        if !self.constrained {
            return Some((
                fbg + desired.0.clamp(-delta_x.0, delta_x.0),
                fiob + desired.1.clamp(-delta_x.1, delta_x.1),
            ));
        }
        let prev = tree.incoming_step(from, self.prev_step);
        let bg_step = feasible_step_1d(
            self.constraints.bg_rate,
            self.constraints.bg_accel,
            prev.0,
            delta_x.0,
            desired.0,
        )?;
        let iob_step = feasible_step_1d(
            self.constraints.iob_rate,
            self.constraints.iob_accel,
            prev.1,
            delta_x.1,
            desired.1,
        )?;
        Some((fbg + bg_step, fiob + iob_step))
    }

    /// Full validity of connecting `to` as a child of vertex `from`.
    fn valid_connection(&self, tree: &Tree, from: usize, to: (f64, f64)) -> bool {
        // Budget: the new vertex would sit at depth(from) + 1.
        if tree.cost(from) + 1 >= self.budget {
            return false;
        }
        // Hazard avoidance applies to the new state.
        if self.regions.is_hazardous(to.0) || to.1 < 0.0 {
            return false;
        }
        if !self.constrained {
            return true;
        }
        let (fbg, fiob) = tree.point(from);
        let step = (to.0 - fbg, to.1 - fiob);
        rate_ok(step, &self.constraints)
            && accel_ok(tree.incoming_step(from, self.prev_step), step, &self.constraints)
    }

    /// Whether vertex `child`'s existing outgoing edges stay smooth if its
    /// incoming edge becomes `new_incoming`.
    fn children_stay_valid(&self, tree: &Tree, child: usize, new_incoming: (f64, f64)) -> bool {
        if !self.constrained {
            return true;
        }
        let (cbg, ciob) = tree.point(child);
        tree.children[child].iter().all(|&gc| {
            let (gbg, giob) = tree.point(gc);
            accel_ok(new_incoming, (gbg - cbg, giob - ciob), &self.constraints)
        })
    }
}

fn run(
    x_init: (f64, f64),
    cfg: &PlanConfig,
    seed: u64,
    constrained: bool,
) -> Result<PlanResult, PlanError> {
    cfg.validate()?;
    let checker = EdgeChecker {
        constraints: cfg.effective_constraints(),
        regions: cfg.regions,
        budget: cfg.budget,
        constrained,
        prev_step: cfg.prev_step,
    };

    let mut tree = Tree::new(x_init);

    // Degenerate start: already in the target region.
    if cfg.regions.in_target(x_init.0) {
        return Ok(PlanResult {
            vertices: tree.vertices,
            optimal_goal: 0,
            path: vec![x_init],
            ttmh: 0,
            conv_trials: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut goals: Vec<usize> = Vec::new();
    let mut first_goal_trial = 0usize;

    for k in 1..=cfg.k_max {
        let sample = if rng.gen_bool(cfg.goal_bias) {
            (
                rng.gen_range(cfg.regions.target_low..=cfg.regions.target_high),
                rng.gen_range(cfg.sample_bounds.iob.0..=cfg.sample_bounds.iob.1),
            )
        } else {
            (
                rng.gen_range(cfg.sample_bounds.bg.0..=cfg.sample_bounds.bg.1),
                rng.gen_range(cfg.sample_bounds.iob.0..=cfg.sample_bounds.iob.1),
            )
        };

        // Nearest vertex in step-scaled distance.
        let nearest = (0..tree.vertices.len())
            .min_by(|&a, &b| {
                scaled_dist(tree.point(a), sample, cfg.delta_x)
                    .total_cmp(&scaled_dist(tree.point(b), sample, cfg.delta_x))
            })
            .expect("tree is never empty");

        // Steer: one increment toward the sample.
        let x_new = match checker.steer(&tree, nearest, sample, cfg.delta_x) {
            Some(p) => p,
            None => continue,
        };

        if !checker.valid_connection(&tree, nearest, x_new) {
            continue;
        }

        // Choose the lowest-cost valid parent among the near set.
        let near: Vec<usize> = (0..tree.vertices.len())
            .filter(|&i| scaled_dist(tree.point(i), x_new, cfg.delta_x) <= cfg.gamma)
            .collect();
        let mut best_parent = nearest;
        let mut best_cost = tree.cost(nearest) + 1;
        for &cand in &near {
            let c = tree.cost(cand) + 1;
            if c < best_cost && checker.valid_connection(&tree, cand, x_new) {
                best_parent = cand;
                best_cost = c;
            }
        }
        let new_idx = tree.add(x_new, best_parent);

        // Rewire: route near vertices through the new one when shorter,
        // keeping their subtrees smooth.
        for &cand in &near {
            if cand == new_idx || tree.vertices[cand].parent.is_none() {
                continue;
            }
            let cand_point = tree.point(cand);
            if tree.cost(new_idx) + 1 < tree.cost(cand)
                && checker.valid_connection(&tree, new_idx, cand_point)
                && checker.children_stay_valid(
                    &tree,
                    cand,
                    (cand_point.0 - x_new.0, cand_point.1 - x_new.1),
                )
            {
                tree.reparent(cand, new_idx);
            }
        }

        if cfg.regions.in_target(x_new.0) {
            if goals.is_empty() {
                first_goal_trial = k;
            }
            goals.push(new_idx);
        }
    }

    if goals.is_empty() {
        return Err(PlanError::PathNotFound { trials: cfg.k_max });
    }

    // Optimal goal: shortest path, ties broken by the largest minimum
    // hazard margin along the path, then by insertion order.
    let path_of = |goal: usize| -> Vec<(f64, f64)> {
        let mut rev = vec![goal];
        while let Some(p) = tree.vertices[*rev.last().unwrap()].parent {
            rev.push(p);
        }
        rev.reverse();
        rev.into_iter().map(|i| tree.point(i)).collect()
    };
    let margin_of = |path: &[(f64, f64)]| -> f64 {
        path.iter()
            .map(|p| cfg.regions.hazard_margin(p.0))
            .fold(f64::INFINITY, f64::min)
    };

    let mut best = goals[0];
    let mut best_path = path_of(best);
    for &g in &goals[1..] {
        let p = path_of(g);
        let better = p.len() < best_path.len()
            || (p.len() == best_path.len() && margin_of(&p) > margin_of(&best_path));
        if better {
            best = g;
            best_path = p;
        }
    }

    let ttmh = (best_path.len() - 1) as u32;
    Ok(PlanResult {
        vertices: tree.vertices,
        optimal_goal: best,
        path: best_path,
        ttmh,
        conv_trials: first_goal_trial,
    })
}

/// Safety-constrained mitigation path planning.
pub fn plan(x_init: (f64, f64), cfg: &PlanConfig, seed: u64) -> Result<PlanResult, PlanError> {
    run(x_init, cfg, seed, true)
}

/// Baseline without the derivative constraints; hazard avoidance and the
/// budget remain structural.
pub fn plan_unconstrained(
    x_init: (f64, f64),
    cfg: &PlanConfig,
    seed: u64,
) -> Result<PlanResult, PlanError> {
    run(x_init, cfg, seed, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathViolation {
    BgRate,
    IobRate,
    BgAccel,
    IobAccel,
    Hazard,
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCheck {
    pub valid: bool,
    pub first_violation: Option<(usize, PathViolation)>,
}

/// Deterministic verification of the full constraint set over a path.
/// `prev_step` anchors the second-derivative check of the first edge; when
/// absent that check starts at the second edge.
pub fn check_path(
    path: &[(f64, f64)],
    constraints: &ReachableSetSpec,
    regions: &RegionSpec,
    budget: u32,
    prev_step: Option<(f64, f64)>,
) -> PathCheck {
    let fail = |i, v| PathCheck {
        valid: false,
        first_violation: Some((i, v)),
    };
    if path.len() as u32 - 1 >= budget {
        return fail(path.len() - 1, PathViolation::Budget);
    }
    let mut prev = prev_step;
    for i in 1..path.len() {
        let step = (path[i].0 - path[i - 1].0, path[i].1 - path[i - 1].1);
        if !constraints.bg_rate.contains(step.0) {
            return fail(i, PathViolation::BgRate);
        }
        if !constraints.iob_rate.contains(step.1) {
            return fail(i, PathViolation::IobRate);
        }
        if let Some(p) = prev {
            if !constraints.bg_accel.contains(step.0 - p.0) {
                return fail(i, PathViolation::BgAccel);
            }
            if !constraints.iob_accel.contains(step.1 - p.1) {
                return fail(i, PathViolation::IobAccel);
            }
        }
        if regions.is_hazardous(path[i].0) {
            return fail(i, PathViolation::Hazard);
        }
        prev = Some(step);
    }
    PathCheck {
        valid: true,
        first_violation: None,
    }
}
