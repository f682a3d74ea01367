//! Corrective-action generation: a recurrent sequence regressor maps a
//! target state path to the insulin rates realizing it (one action per
//! transition), trained with a rule-compliance penalty. Training uses a
//! smooth surrogate (hinge distance from the predicted rate to the nearest
//! compliant rate region) whose zero set coincides with compliance; the
//! exact indicator-style penalty is reported as a metric. A numeric
//! inverse of the plant model provides the model-based route to the same
//! problem.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hms::{required_actions, HmsRule, RequiredActions};
use crate::nn::{zero_grads, Adam, NnError, SeqRegressor};
use crate::patient::{step, PatientProfile, PlantState};
use crate::prednet::{Normalizer, Trajectory};
use crate::types::{classify_rate_change, transform, ActionKind, ContextVector, ControlAction};

#[derive(Debug, Error, PartialEq)]
pub enum ActError {
    #[error("path must have at least two states, got {0}")]
    PathTooShort(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Minimum rate separation treated as a deliberate change: predictions
/// within this margin of the previous rate classify as keep.
pub const RATE_GAP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActModelConfig {
    /// Transitions per training sample.
    pub window: usize,
    pub hidden: (usize, usize),
}

impl Default for ActModelConfig {
    fn default() -> Self {
        Self {
            window: 12,
            hidden: (32, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActHyper {
    /// Weight of the data term; 1.0 disables the compliance penalty.
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-violation weight.
    pub rule_weight: f64,
    pub seed: u64,
    pub max_windows_per_epoch: Option<usize>,
}

impl Default for ActHyper {
    fn default() -> Self {
        Self {
            eta: 0.7,
            learning_rate: 3e-3,
            epochs: 40,
            batch_size: 32,
            rule_weight: 1.0,
            seed: 2,
            max_windows_per_epoch: Some(3000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActEpochStats {
    pub epoch: usize,
    pub mse: f64,
    /// Smooth surrogate penalty actually trained on.
    pub surrogate: f64,
    /// Exact indicator penalty `k (2 sigma(sum w_i) - 1)`, reported only.
    pub exact_penalty: f64,
    /// Sigmoid scale matching the penalty to the data term's range.
    pub kappa: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActModel {
    pub config: ActModelConfig,
    pub norm: Normalizer,
    pub eta: f64,
    net: SeqRegressor,
}

impl ActModel {
    pub fn ensure_grads(&mut self) {
        self.net.ensure_grads();
    }
    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }
}

fn transition_feature(norm: &Normalizer, from: (f64, f64), to: (f64, f64)) -> Vec<f64> {
    vec![
        norm.bg(from.0),
        norm.iob(from.1),
        norm.bg(to.0),
        norm.iob(to.1),
    ]
}

/// Distance from a raw predicted rate to the compliant rate set implied by
/// the matched rules, given the previous rate. Zero iff the discretized
/// action satisfies every matched rule. Piecewise linear in `y`.
pub fn compliance_distance(y: f64, prev_rate: f64, req: &RequiredActions) -> f64 {
    if req.is_empty() {
        return 0.0;
    }
    let interval = |kind: ActionKind| -> Option<(f64, f64)> {
        match kind {
            ActionKind::StopInsulin => (prev_rate > 0.0).then_some((0.0, 0.0)),
            ActionKind::KeepInsulin => Some((prev_rate, prev_rate)),
            ActionKind::IncreaseInsulin => Some((prev_rate + RATE_GAP, f64::INFINITY)),
            ActionKind::DecreaseInsulin => (prev_rate >= 2.0 * RATE_GAP)
                .then_some((RATE_GAP, prev_rate - RATE_GAP)),
        }
    };
    let dist_to = |y: f64, (lo, hi): (f64, f64)| -> f64 { (lo - y).max(y - hi).max(0.0) };

    if !req.permitted.is_empty() {
        return req
            .permitted
            .iter()
            .filter_map(|&k| interval(k))
            .map(|iv| dist_to(y, iv))
            .fold(f64::INFINITY, f64::min)
            // Every realizable kind forbidden leaves nothing to aim for.
            .min(1e3);
    }
    // Forbid-only: push the prediction out of each forbidden region.
    req.forbidden
        .iter()
        .filter_map(|&k| interval(k))
        .map(|iv| {
            let d = dist_to(y, iv);
            if d > 0.0 {
                0.0
            } else {
                // Inside the forbidden region: distance to its edge plus
                // the gap, linear in y.
                (RATE_GAP + (iv.1 - y).min(y - iv.0)).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Whether a discretized action violates any matched rule (exact Eq-style
/// indicator, one count per (step, matched rule)).
fn exact_violations(kind: ActionKind, rules: &[HmsRule], ctx: &ContextVector) -> usize {
    rules
        .iter()
        .filter(|r| crate::hms::match_context(r, ctx))
        .filter(|r| !r.complies(kind))
        .count()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ActSample<'a> {
    traj: &'a Trajectory,
    /// Index of the first generated action.
    start: usize,
}

impl ActSample<'_> {
    fn inputs(&self, n: usize, norm: &Normalizer) -> Vec<Vec<f64>> {
        (0..n)
            .map(|j| {
                let a = &self.traj.states[self.start + j];
                let b = &self.traj.states[self.start + j + 1];
                transition_feature(norm, (a.bg, a.iob), (b.bg, b.iob))
            })
            .collect()
    }

    fn target_rate(&self, j: usize) -> f64 {
        self.traj.actions[self.start + j].rate
    }

    fn prev_rate(&self, j: usize) -> f64 {
        self.traj.actions[self.start + j - 1].rate
    }

    /// Context in which action j is taken.
    fn context(&self, j: usize) -> ContextVector {
        let idx = self.start + j;
        transform(&self.traj.states[idx - 1], &self.traj.states[idx])
            .expect("trajectory cycles are consecutive")
    }
}

struct ActLoss {
    mse: f64,
    surrogate_sum: f64,
    exact_count: usize,
    dys: Vec<Vec<f64>>,
    /// d surrogate_sum / d y_j (normalized space), applied after the
    /// sigmoid factor is known.
    d_surr: Vec<f64>,
}

fn act_loss_terms(
    sample: &ActSample,
    ys: &[Vec<f64>],
    norm: &Normalizer,
    rules: &[HmsRule],
    eta: f64,
    rule_weight: f64,
) -> ActLoss {
    let n = ys.len();
    let count = n as f64;
    let mut mse = 0.0;
    let mut surrogate_sum = 0.0;
    let mut exact_count = 0usize;
    let mut dys = vec![vec![0.0]; n];
    let mut d_surr = vec![0.0; n];

    let mut prev_pred_rate = sample.prev_rate(0);
    for j in 0..n {
        let t_norm = norm.rate(sample.target_rate(j));
        let e = ys[j][0] - t_norm;
        mse += e * e / count;
        dys[j][0] += eta * 2.0 * e / count;

        if eta < 1.0 {
            let ctx = sample.context(j);
            let req = required_actions(rules, &ctx);
            let y_phys = ys[j][0] * norm.rate_scale + norm.rate_off;
            // Teacher-forced previous rate keeps the loss separable per
            // step, so the analytic gradient is exact.
            let prev = sample.prev_rate(j);
            let d = rule_weight * compliance_distance(y_phys, prev, &req);
            surrogate_sum += d;
            if d > 0.0 {
                // Central-difference slope of the hinge at y (it is
                // piecewise linear, so this is exact off the kinks).
                let h = 1e-6;
                let dp = compliance_distance(y_phys + h, prev, &req);
                let dm = compliance_distance(y_phys - h, prev, &req);
                d_surr[j] = rule_weight * (dp - dm) / (2.0 * h) * norm.rate_scale;
            }
            // Exact metric discretizes against the running prediction.
            let kind = classify_rate_change(prev_pred_rate, y_phys.max(0.0));
            exact_count += exact_violations(kind, rules, &ctx);
            prev_pred_rate = y_phys.max(0.0);
        }
    }

    ActLoss {
        mse,
        surrogate_sum,
        exact_count,
        dys,
        d_surr,
    }
}

fn collect_samples<'a>(dataset: &'a [Trajectory], window: usize) -> Vec<ActSample<'a>> {
    let mut out = Vec::new();
    for traj in dataset {
        if traj.len() < window + 2 {
            continue;
        }
        for start in 1..(traj.len() - window) {
            out.push(ActSample { traj, start });
        }
    }
    out
}

/// Trains the action generator on (state path, action sequence) pairs cut
/// from closed-loop trajectories.
pub fn train_act(
    dataset: &[Trajectory],
    rules: &[HmsRule],
    cfg: ActModelConfig,
    hyper: &ActHyper,
) -> Result<(ActModel, Vec<ActEpochStats>), NnError> {
    let norm = Normalizer::default();
    let samples = collect_samples(dataset, cfg.window);
    if samples.is_empty() {
        return Err(NnError::EmptyDataset);
    }

    let mut net = SeqRegressor::new(4, 1, cfg.hidden, hyper.seed);
    let mut opt = Adam::new(hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xac7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    let mut kappa = 1.0;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let visit = hyper
            .max_windows_per_epoch
            .map(|m| m.min(order.len()))
            .unwrap_or(order.len());
        let mut mse_sum = 0.0;
        let mut surr_sum = 0.0;
        let mut exact_sum = 0.0;
        let mut seen = 0usize;

        for (batch_idx, chunk) in order[..visit].chunks(hyper.batch_size).enumerate() {
            zero_grads(&mut net.tensors_mut());
            let mut batch_loss = 0.0;
            for &si in chunk {
                let sample = &samples[si];
                let inputs = sample.inputs(cfg.window, &norm);
                let pass = net.forward(&inputs);
                let terms =
                    act_loss_terms(sample, &pass.ys, &norm, rules, hyper.eta, hyper.rule_weight);

                // Penalty: k (2 sigma(S) - 1), S = surrogate sum.
                let sig = sigmoid(terms.surrogate_sum);
                let pen = kappa * (2.0 * sig - 1.0);
                let dpen_ds = kappa * 2.0 * sig * (1.0 - sig);

                let scale = 1.0 / chunk.len() as f64;
                let dys: Vec<Vec<f64>> = terms
                    .dys
                    .iter()
                    .zip(&terms.d_surr)
                    .map(|(d, ds)| vec![(d[0] + (1.0 - hyper.eta) * dpen_ds * ds) * scale])
                    .collect();
                net.backward(&pass, &dys);

                mse_sum += terms.mse;
                surr_sum += pen;
                let exact_sig = sigmoid(terms.exact_count as f64 * hyper.rule_weight);
                exact_sum += kappa * (2.0 * exact_sig - 1.0);
                batch_loss += (hyper.eta * terms.mse + (1.0 - hyper.eta) * pen) * scale;
            }
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            opt.step(&mut net.tensors_mut());
            seen += chunk.len();
        }

        let mse = mse_sum / seen as f64;
        let surrogate = surr_sum / seen as f64;
        let exact_penalty = exact_sum / seen as f64;
        curve.push(ActEpochStats {
            epoch,
            mse,
            surrogate,
            exact_penalty,
            kappa,
            total: hyper.eta * mse + (1.0 - hyper.eta) * surrogate,
        });
        // Keep the sigmoid term in the data term's range next epoch.
        kappa = mse.max(1e-6);
    }

    Ok((
        ActModel {
            config: cfg,
            norm,
            eta: hyper.eta,
            net,
        },
        curve,
    ))
}

/// Generates the action sequence realizing a state path: one rate per
/// transition, clamped non-negative.
pub fn generate(model: &ActModel, path: &[(f64, f64)]) -> Result<Vec<ControlAction>, ActError> {
    if path.len() < 2 {
        return Err(ActError::PathTooShort(path.len()));
    }
    let inputs: Vec<Vec<f64>> = path
        .windows(2)
        .map(|w| transition_feature(&model.norm, w[0], w[1]))
        .collect();
    let pass = model.net.forward(&inputs);
    let mut prev = f64::NAN;
    Ok(pass
        .ys
        .iter()
        .map(|y| {
            let rate = (y[0] * model.norm.rate_scale + model.norm.rate_off).max(0.0);
            let action = if prev.is_nan() {
                ControlAction::from_rate(rate, rate)
            } else {
                ControlAction::from_rate(rate, prev)
            };
            prev = rate;
            action
        })
        .collect())
}

/// Result of numerically inverting the plant over a path.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseResult {
    pub actions: Vec<ControlAction>,
    /// Steps where the required rate fell outside [0, max_rate] and was
    /// clamped to the nearest bound.
    pub clamped: Vec<bool>,
}

/// Model-based route: per transition, solve for the constant one-cycle
/// rate driving plasma glucose from path[i] to path[i+1], by bisection on
/// the monotone rate-to-glucose map. The internal (X, I) state evolves
/// with the chosen rates starting from `start`.
pub fn inverse_model(
    path: &[(f64, f64)],
    profile: &PatientProfile,
    start: &PlantState,
    max_rate: f64,
) -> Result<InverseResult, ActError> {
    if path.len() < 2 {
        return Err(ActError::PathTooShort(path.len()));
    }
    let mut plant = *start;
    let mut actions = Vec::with_capacity(path.len() - 1);
    let mut clamped = Vec::with_capacity(path.len() - 1);
    let mut prev_rate = profile.basal_rate_uh();

    for target in path.iter().skip(1) {
        let g_of = |rate: f64, from: &PlantState| -> f64 {
            let a = ControlAction::from_rate(rate, rate);
            step(from, profile, &a, crate::types::CYCLE_MINUTES)
                .map(|s| s.g)
                .unwrap_or(f64::NAN)
        };
        let g_min_insulin = g_of(0.0, &plant); // highest reachable glucose
        let g_max_insulin = g_of(max_rate, &plant); // lowest reachable

        let (rate, was_clamped) = if target.0 >= g_min_insulin {
            (0.0, target.0 > g_min_insulin + 1e-9)
        } else if target.0 <= g_max_insulin {
            (max_rate, target.0 < g_max_insulin - 1e-9)
        } else {
            let (mut lo, mut hi) = (0.0, max_rate);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if g_of(mid, &plant) > target.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (0.5 * (lo + hi), false)
        };

        let action = ControlAction::from_rate(rate, prev_rate);
        plant = step(&plant, profile, &action, crate::types::CYCLE_MINUTES)
            .expect("inverse step stays finite");
        actions.push(action);
        clamped.push(was_clamped);
        prev_rate = rate;
    }

    Ok(InverseResult { actions, clamped })
}
