//! Knowledge-constrained sequence prediction: an encoder-decoder forecasts
//! the next N (BG, IOB) states from a window of past states and actions,
//! trained with a reachability penalty that charges any predicted step
//! landing outside the one-cycle reachable box of its ground-truth
//! predecessor. Hazard inference and deadline estimation scan the
//! predicted trajectory against the region boundaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{zero_grads, Adam, NnError, Seq2Seq};
use crate::types::{
    nearest_reachable, transform, ContextVector, ControlAction, RegionSpec, ReachableSetSpec,
    SystemState,
};

/// Fixed input/output scaling; constants rather than dataset statistics so
/// checkpoints stay portable across campaigns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub bg_off: f64,
    pub bg_scale: f64,
    pub iob_off: f64,
    pub iob_scale: f64,
    pub rate_off: f64,
    pub rate_scale: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            bg_off: 120.0,
            bg_scale: 60.0,
            iob_off: 1.0,
            iob_scale: 2.0,
            rate_off: 1.0,
            rate_scale: 1.0,
        }
    }
}

impl Normalizer {
    pub fn bg(&self, v: f64) -> f64 {
        (v - self.bg_off) / self.bg_scale
    }
    pub fn iob(&self, v: f64) -> f64 {
        (v - self.iob_off) / self.iob_scale
    }
    pub fn rate(&self, v: f64) -> f64 {
        (v - self.rate_off) / self.rate_scale
    }
    pub fn bg_inv(&self, v: f64) -> f64 {
        v * self.bg_scale + self.bg_off
    }
    pub fn iob_inv(&self, v: f64) -> f64 {
        v * self.iob_scale + self.iob_off
    }
}

/// One closed-loop run: per-cycle observable states and actuated actions,
/// index-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<SystemState>,
    pub actions: Vec<ControlAction>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Ground-truth label: any state in the hazardous region.
    pub fn is_hazardous(&self, r: &RegionSpec) -> bool {
        self.states.iter().any(|s| r.is_hazardous(s.bg))
    }

    pub fn first_unsafe_cycle(&self, r: &RegionSpec) -> Option<u32> {
        self.states.iter().find(|s| r.is_hazardous(s.bg)).map(|s| s.t)
    }
}

pub type PredictedTrajectory = Vec<(f64, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    /// Input window length (k + 1 past cycles).
    pub window: usize,
    /// Prediction horizon N in cycles.
    pub horizon: usize,
    pub hidden: (usize, usize),
}

impl SeqModelConfig {
    pub fn short() -> Self {
        Self {
            window: 12,
            horizon: 6,
            hidden: (32, 16),
        }
    }

    pub fn long() -> Self {
        Self {
            window: 12,
            horizon: 24,
            hidden: (32, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    /// Weight of the data term; 1.0 recovers the unconstrained model.
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-violation weight in the reachability penalty.
    pub penalty_weight: f64,
    /// Deterministic shuffling/subsampling seed.
    pub seed: u64,
    /// Cap on windows visited per epoch (deterministic subsample).
    pub max_windows_per_epoch: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            eta: 0.7,
            learning_rate: 3e-3,
            epochs: 40,
            batch_size: 32,
            penalty_weight: 1.0,
            seed: 1,
            max_windows_per_epoch: Some(3000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mse: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Trained sequence predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqModel {
    pub config: SeqModelConfig,
    pub norm: Normalizer,
    pub eta: f64,
    net: Seq2Seq,
}

impl SeqModel {
    pub fn ensure_grads(&mut self) {
        self.net.ensure_grads();
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }
}

fn feature(norm: &Normalizer, s: &SystemState, a: &ControlAction) -> Vec<f64> {
    vec![norm.bg(s.bg), norm.iob(s.iob), norm.rate(a.rate)]
}

/// One training window: model inputs plus the ground truth needed by the
/// reachability penalty.
struct WindowSample<'a> {
    traj: &'a Trajectory,
    /// Index of the window's last cycle within the trajectory.
    end: usize,
}

impl WindowSample<'_> {
    fn inputs(&self, cfg: &SeqModelConfig, norm: &Normalizer) -> (Vec<Vec<f64>>, Vec<f64>) {
        let lo = self.end + 1 - cfg.window;
        let window: Vec<Vec<f64>> = (lo..=self.end)
            .map(|t| feature(norm, &self.traj.states[t], &self.traj.actions[t]))
            .collect();
        let last = &self.traj.states[self.end];
        (window, vec![norm.bg(last.bg), norm.iob(last.iob)])
    }

    fn target(&self, j: usize) -> &SystemState {
        &self.traj.states[self.end + 1 + j]
    }

    /// Ground-truth predecessor of predicted step `j` and its context.
    fn anchor_context(&self, j: usize) -> ContextVector {
        let idx = self.end + j;
        transform(&self.traj.states[idx - 1], &self.traj.states[idx])
            .expect("trajectory cycles are consecutive")
    }
}

struct LossTerms {
    mse: f64,
    penalty: f64,
    /// Gradient per horizon step in normalized output space.
    dys: Vec<Vec<f64>>,
}

/// Eq-style composite loss: eta * MSE(normalized outputs vs targets)
/// + (1 - eta) * sum over steps of w * MSE(s_bar, mu(prediction)), where
/// the second term is active only for steps outside the reachable box of
/// their ground-truth predecessor. The projected point s_bar is treated as
/// constant in the gradient (subgradient at the clamp boundary).
fn composite_loss(
    sample: &WindowSample,
    ys: &[Vec<f64>],
    norm: &Normalizer,
    constraints: &ReachableSetSpec,
    eta: f64,
    penalty_weight: f64,
) -> LossTerms {
    let n = ys.len();
    let count = (n * 2) as f64;
    let mut mse = 0.0;
    let mut penalty = 0.0;
    let mut dys = vec![vec![0.0, 0.0]; n];

    for j in 0..n {
        let target = sample.target(j);
        let t_bg = norm.bg(target.bg);
        let t_iob = norm.iob(target.iob);
        let e_bg = ys[j][0] - t_bg;
        let e_iob = ys[j][1] - t_iob;
        mse += (e_bg * e_bg + e_iob * e_iob) / count;
        dys[j][0] += eta * 2.0 * e_bg / count;
        dys[j][1] += eta * 2.0 * e_iob / count;

        if eta < 1.0 {
            let anchor = sample.anchor_context(j);
            let pred_bg = norm.bg_inv(ys[j][0]);
            let pred_iob = norm.iob_inv(ys[j][1]);
            let mu_pred = ContextVector::new(
                pred_bg,
                pred_iob,
                pred_bg - anchor.bg(),
                pred_iob - anchor.iob(),
            );
            let s_bar = nearest_reachable(&anchor, &mu_pred, constraints);
            if s_bar != mu_pred {
                let diff: Vec<f64> = mu_pred
                    .mu
                    .iter()
                    .zip(s_bar.mu.iter())
                    .map(|(a, b)| a - b)
                    .collect();
                let term: f64 = diff.iter().map(|d| d * d).sum::<f64>() / 4.0;
                penalty += penalty_weight * term;
                let w = (1.0 - eta) * penalty_weight * 2.0 / 4.0;
                // d mu / d pred: bg feeds dims 0 and 2, iob feeds 1 and 3.
                let d_bg_phys = w * (diff[0] + diff[2]);
                let d_iob_phys = w * (diff[1] + diff[3]);
                dys[j][0] += d_bg_phys * norm.bg_scale;
                dys[j][1] += d_iob_phys * norm.iob_scale;
            }
        }
    }

    LossTerms { mse, penalty, dys }
}

fn collect_windows<'a>(dataset: &'a [Trajectory], cfg: &SeqModelConfig) -> Vec<WindowSample<'a>> {
    let mut out = Vec::new();
    for traj in dataset {
        if traj.len() < cfg.window + cfg.horizon + 1 {
            continue;
        }
        // end >= window ensures an anchor predecessor exists for mu.
        for end in cfg.window..(traj.len() - cfg.horizon) {
            out.push(WindowSample { traj, end });
        }
    }
    out
}

/// Trains a predictor on closed-loop trajectories.
pub fn train(
    dataset: &[Trajectory],
    cfg: SeqModelConfig,
    constraints: &ReachableSetSpec,
    hyper: &TrainHyper,
) -> Result<(SeqModel, Vec<EpochStats>), NnError> {
    let norm = Normalizer::default();
    let windows = collect_windows(dataset, &cfg);
    if windows.is_empty() {
        return Err(NnError::EmptyDataset);
    }

    let mut net = Seq2Seq::new(3, 2, cfg.hidden, hyper.seed);
    let mut opt = Adam::new(hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let visit = hyper
            .max_windows_per_epoch
            .map(|m| m.min(order.len()))
            .unwrap_or(order.len());
        let mut mse_sum = 0.0;
        let mut pen_sum = 0.0;
        let mut seen = 0usize;

        for (batch_idx, chunk) in order[..visit].chunks(hyper.batch_size).enumerate() {
            zero_grads(&mut net.tensors_mut());
            let mut batch_loss = 0.0;
            for &wi in chunk {
                let sample = &windows[wi];
                let (inputs, y0) = sample.inputs(&cfg, &norm);
                let pass = net.forward(&inputs, &y0, cfg.horizon);
                let terms = composite_loss(
                    sample,
                    &pass.ys,
                    &norm,
                    constraints,
                    hyper.eta,
                    hyper.penalty_weight,
                );
                let scale = 1.0 / chunk.len() as f64;
                let dys: Vec<Vec<f64>> = terms
                    .dys
                    .iter()
                    .map(|d| d.iter().map(|g| g * scale).collect())
                    .collect();
                net.backward(&pass, &dys);
                mse_sum += terms.mse;
                pen_sum += terms.penalty;
                batch_loss +=
                    (hyper.eta * terms.mse + (1.0 - hyper.eta) * terms.penalty) * scale;
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
        let penalty = pen_sum / seen as f64;
        curve.push(EpochStats {
            epoch,
            mse,
            penalty,
            total: hyper.eta * mse + (1.0 - hyper.eta) * penalty,
        });
    }

    Ok((
        SeqModel {
            config: cfg,
            norm,
            eta: hyper.eta,
            net,
        },
        curve,
    ))
}

/// Forecasts N states from the last `window` states and actions.
pub fn predict(
    model: &SeqModel,
    states: &[SystemState],
    actions: &[ControlAction],
) -> Result<PredictedTrajectory, NnError> {
    let w = model.config.window;
    if states.len() != w || actions.len() != w {
        return Err(NnError::WindowMismatch {
            got: states.len().min(actions.len()),
            want: w,
        });
    }
    let inputs: Vec<Vec<f64>> = states
        .iter()
        .zip(actions)
        .map(|(s, a)| feature(&model.norm, s, a))
        .collect();
    let last = &states[w - 1];
    let y0 = vec![model.norm.bg(last.bg), model.norm.iob(last.iob)];
    let pass = model.net.forward(&inputs, &y0, model.config.horizon);
    Ok(pass
        .ys
        .iter()
        .map(|y| (model.norm.bg_inv(y[0]), model.norm.iob_inv(y[1])))
        .collect())
}

/// Hazard call over a predicted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardVerdict {
    pub hazard: bool,
    /// Cycles until the first predicted unsafe state (1-based offset into
    /// the prediction); present iff `hazard`.
    pub deadline: Option<u32>,
    /// 0-based index of that state in `predicted`.
    pub first_unsafe_index: Option<usize>,
    pub predicted: PredictedTrajectory,
}

/// Scans the prediction for the first state outside the safe BG band.
pub fn infer_hazard(predicted: PredictedTrajectory, r: &RegionSpec) -> HazardVerdict {
    let first = predicted.iter().position(|(bg, _)| r.is_hazardous(*bg));
    HazardVerdict {
        hazard: first.is_some(),
        deadline: first.map(|i| i as u32 + 1),
        first_unsafe_index: first,
        predicted,
    }
}

/// Two-level scan: the short model runs first; the long model only runs
/// when the short one sees no hazard.
pub fn two_level_scan(
    short: &SeqModel,
    long: &SeqModel,
    states: &[SystemState],
    actions: &[ControlAction],
    r: &RegionSpec,
) -> Result<(HazardVerdict, bool), NnError> {
    let v_short = infer_hazard(predict(short, states, actions)?, r);
    if v_short.hazard {
        return Ok((v_short, true));
    }
    let v_long = infer_hazard(predict(long, states, actions)?, r);
    let quick = false;
    Ok((v_long, quick))
}

/// Held-out evaluation: per-point state RMSE, per-simulation hazard
/// classification, deadline error, and reaction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredEval {
    pub state_rmse_bg: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub deadline_rmse: f64,
    /// Mean cycles between first detection and the trace entering the
    /// hazardous region, over truly hazardous detected traces.
    pub mean_reaction_time: f64,
    pub n_hazardous: usize,
    pub n_clean: usize,
}

pub fn eval_metrics(
    model: &SeqModel,
    test: &[Trajectory],
    r: &RegionSpec,
) -> Result<PredEval, NnError> {
    if test.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let w = model.config.window;
    let n = model.config.horizon;

    let mut sq_err = 0.0;
    let mut n_points = 0usize;
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut deadline_sq = Vec::new();
    let mut reactions = Vec::new();

    for traj in test {
        if traj.len() < w + n + 1 {
            continue;
        }
        let truly_hazard = traj.is_hazardous(r);
        let mut detected_at: Option<(usize, u32)> = None;

        for end in (w - 1)..(traj.len() - n) {
            let states = &traj.states[end + 1 - w..=end];
            let actions = &traj.actions[end + 1 - w..=end];
            let pred = predict(model, states, actions)?;
            for (j, (bg, _)) in pred.iter().enumerate() {
                let truth = traj.states[end + 1 + j].bg;
                sq_err += (bg - truth) * (bg - truth);
                n_points += 1;
            }
            if detected_at.is_none() {
                let v = infer_hazard(pred, r);
                if v.hazard {
                    detected_at = Some((end, v.deadline.unwrap()));
                }
            }
        }

        match (truly_hazard, detected_at) {
            (true, Some((end, deadline))) => {
                tp += 1;
                if let Some(first_unsafe) = traj.first_unsafe_cycle(r) {
                    let actual = first_unsafe as f64 - traj.states[end].t as f64;
                    deadline_sq.push((deadline as f64 - actual) * (deadline as f64 - actual));
                    reactions.push(actual);
                }
            }
            (true, None) => fneg += 1,
            (false, Some(_)) => fp += 1,
            (false, None) => tn += 1,
        }
    }

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(PredEval {
        state_rmse_bg: if n_points == 0 { 0.0 } else { (sq_err / n_points as f64).sqrt() },
        fnr: ratio(fneg, tp + fneg),
        fpr: ratio(fp, fp + tn),
        f1: if 2 * tp + fp + fneg == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        },
        deadline_rmse: mean(&deadline_sq).sqrt(),
        mean_reaction_time: mean(&reactions),
        n_hazardous: tp + fneg,
        n_clean: fp + tn,
    })
}
