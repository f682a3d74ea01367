//! Training pipeline: generate unmitigated closed-loop data per patient,
//! split into cross-validation folds, train the prediction and action
//! models (knowledge-constrained and eta = 1 twins), the FFC regressor,
//! and the sensor-guard one-step predictor; persist everything as one
//! versioned checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actnet::{train_act, ActHyper, ActModel, ActModelConfig};
use crate::baselines::{train_ffc, FfcModel};
use crate::fault::GridScale;
use crate::harness::campaign::training_runs;
use crate::harness::config::HarnessConfig;
use crate::nn::NnError;
use crate::prednet::{
    eval_metrics, train, EpochStats, PredEval, SeqModel, SeqModelConfig, TrainHyper, Trajectory,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {detail}. Train first: knowsafe train --out <dir>")]
    Missing { path: String, detail: String },
    #[error("checkpoint version {got}, expected {want}")]
    Version { got: u32, want: u32 },
}

/// Every model one patient's engines need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientModels {
    pub prednet_s: SeqModel,
    pub prednet_l: SeqModel,
    /// eta = 1 twins (no knowledge integration).
    pub lstm_s: SeqModel,
    pub lstm_l: SeqModel,
    pub actnet: ActModel,
    pub act_plain: ActModel,
    pub ffc: FfcModel,
    /// One-step predictor for the CUSUM sensor guard.
    pub guard: SeqModel,
}

impl PatientModels {
    pub fn ensure_grads(&mut self) {
        self.prednet_s.ensure_grads();
        self.prednet_l.ensure_grads();
        self.lstm_s.ensure_grads();
        self.lstm_l.ensure_grads();
        self.actnet.ensure_grads();
        self.act_plain.ensure_grads();
        self.ffc.ensure_grads();
        self.guard.ensure_grads();
    }

    /// Minimal 1-epoch models on synthetic data, for tests exercising
    /// plumbing rather than model quality.
    pub fn untrained_stub() -> PatientModels {
        use crate::types::{ActionKind, ControlAction, SystemState};
        let traj = Trajectory {
            states: (0..40)
                .map(|t| SystemState::new(120.0 + (t % 5) as f64, 1.0, t))
                .collect(),
            actions: (0..40)
                .map(|_| ControlAction {
                    rate: 1.0,
                    kind: ActionKind::KeepInsulin,
                })
                .collect(),
        };
        let corpus = vec![traj];
        let spec = crate::types::ReachableSetSpec::default();
        let hyper = TrainHyper {
            epochs: 1,
            max_windows_per_epoch: Some(8),
            ..TrainHyper::default()
        };
        let small = |horizon| SeqModelConfig {
            window: 4,
            horizon,
            hidden: (4, 3),
        };
        let (prednet_s, _) = train(&corpus, small(3), &spec, &hyper).unwrap();
        let (prednet_l, _) = train(&corpus, small(6), &spec, &hyper).unwrap();
        let rules = crate::hms::default_rules();
        let act_hyper = ActHyper {
            epochs: 1,
            max_windows_per_epoch: Some(8),
            ..ActHyper::default()
        };
        let (actnet, _) = train_act(
            &corpus,
            &rules,
            ActModelConfig {
                window: 4,
                hidden: (4, 3),
            },
            &act_hyper,
        )
        .unwrap();
        let ffc = train_ffc(&corpus, 4, (4, 3), 1, 3e-3, 3).unwrap();
        let (guard, _) = train(&corpus, small(1), &spec, &hyper).unwrap();
        PatientModels {
            lstm_s: prednet_s.clone(),
            lstm_l: prednet_l.clone(),
            act_plain: actnet.clone(),
            prednet_s,
            prednet_l,
            actnet,
            ffc,
            guard,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub patients: Vec<(String, PatientModels)>,
}

impl ModelBundle {
    pub fn for_patient(&self, name: &str) -> Option<&PatientModels> {
        self.patients
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }
}

/// Per-model training curve plus held-out evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub patient: String,
    pub model: String,
    pub curve: Vec<EpochStats>,
    pub eval: Option<PredEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub models: Vec<ModelReport>,
    pub act_curves: Vec<(String, Vec<crate::actnet::ActEpochStats>)>,
}

/// Deterministic 4-fold split: fold `k` holds out every trajectory whose
/// index is congruent to `k` mod 4.
pub fn split_fold(data: &[Trajectory], fold: usize) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in data.iter().enumerate() {
        if i % 4 == fold % 4 {
            test.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, test)
}

/// Trains the full per-patient model set on unmitigated campaign data.
pub fn train_bundle(
    cfg: &HarnessConfig,
    scale: GridScale,
) -> Result<(ModelBundle, TrainReport), TrainError> {
    let t = &cfg.training;
    let mut patients = Vec::new();
    let mut report = TrainReport::default();

    for profile in &cfg.patients {
        let data = training_runs(cfg, profile, scale, cfg.seed);
        let (train_set, test_set) = split_fold(&data, t.fold);

        let seq_cfg = |horizon| SeqModelConfig {
            window: t.window,
            horizon,
            hidden: t.hidden,
        };
        let hyper = |eta: f64, seed_salt: u64| TrainHyper {
            eta,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: 32,
            penalty_weight: 1.0,
            seed: cfg.seed ^ seed_salt,
            max_windows_per_epoch: t.max_windows_per_epoch,
        };

        let mut trained = |name: &str, horizon: usize, eta: f64, salt: u64| {
            let (model, curve) = train(&train_set, seq_cfg(horizon), &cfg.constraints, &hyper(eta, salt))?;
            let eval = eval_metrics(&model, &test_set, &cfg.regions).ok();
            report.models.push(ModelReport {
                patient: profile.name.clone(),
                model: name.to_string(),
                curve,
                eval,
            });
            Ok::<SeqModel, NnError>(model)
        };

        let prednet_s = trained("prednet-s", t.short_horizon, t.eta, 0x51)?;
        let prednet_l = trained("prednet-l", t.long_horizon, t.eta, 0x52)?;
        let lstm_s = trained("lstm-s", t.short_horizon, 1.0, 0x53)?;
        let lstm_l = trained("lstm-l", t.long_horizon, 1.0, 0x54)?;
        let guard = trained("guard", 1, 1.0, 0x55)?;

        let act_cfg = ActModelConfig {
            window: t.window,
            hidden: t.hidden,
        };
        let act_hyper = |eta: f64, salt: u64| ActHyper {
            eta,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: 32,
            rule_weight: 1.0,
            seed: cfg.seed ^ salt,
            max_windows_per_epoch: t.max_windows_per_epoch,
        };
        let (actnet, act_curve) =
            train_act(&train_set, &cfg.rules, act_cfg, &act_hyper(t.eta, 0x56))?;
        report
            .act_curves
            .push((format!("{}/actnet", profile.name), act_curve));
        let (act_plain, plain_curve) =
            train_act(&train_set, &cfg.rules, act_cfg, &act_hyper(1.0, 0x57))?;
        report
            .act_curves
            .push((format!("{}/act-plain", profile.name), plain_curve));

        let ffc = train_ffc(
            &train_set,
            t.window,
            (16, 8),
            t.epochs.min(20),
            t.learning_rate,
            cfg.seed ^ 0x58,
        )?;

        patients.push((
            profile.name.clone(),
            PatientModels {
                prednet_s,
                prednet_l,
                lstm_s,
                lstm_l,
                actnet,
                act_plain,
                ffc,
                guard,
            },
        ));
    }

    Ok((ModelBundle { patients }, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    bundle: ModelBundle,
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), TrainError> {
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        bundle: bundle.clone(),
    };
    let json = serde_json::to_string(&cp).expect("bundle serializes");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    fs::write(path, json).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::Missing {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| TrainError::Missing {
        path: path.display().to_string(),
        detail: format!("unreadable checkpoint: {e}"),
    })?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            got: cp.version,
            want: CHECKPOINT_VERSION,
        });
    }
    let mut bundle = cp.bundle;
    for (_, m) in bundle.patients.iter_mut() {
        m.ensure_grads();
    }
    Ok(bundle)
}
