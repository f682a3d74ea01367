//! Closed-loop artificial-pancreas safety testbed and library: glucose
//! simulation under controller faults, knowledge-constrained hazard
//! prediction, safety-constrained mitigation planning, corrective action
//! generation, and campaign metrics against baseline engines.

pub mod actnet;
pub mod baselines;
pub mod controller;
pub mod engine;
pub mod fault;
pub mod guard;
pub mod hms;
pub mod nn;
pub mod patient;
pub mod planner;
pub mod prednet;
pub mod types;

pub use types::{
    classify_action, classify_region, nearest_reachable, reachable_contains, transform,
    ActionKind, ContextVector, ControlAction, DimBounds, Region, RegionSpec, ReachableSetSpec,
    SystemState, CYCLE_MINUTES, MU_DIM,
};
