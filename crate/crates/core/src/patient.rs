//! Minimal-model glucose–insulin plant with IOB bookkeeping and an
//! optional CGM noise model.
//!
//! Dynamics (Bergman minimal model, insulin in µU/mL, glucose in mg/dL):
//!
//! ```text
//! dG/dt = -p1 (G - G_b) - X G
//! dX/dt = -p2 X + p3 (I - I_b)
//! dI/dt = -n I + u(t) / V_I
//! ```
//!
//! `u(t)` is the pump delivery in µU/min. `X` is insulin action relative to
//! basal and goes negative when plasma insulin falls below `I_b`, which is
//! what drives glucose above `G_b` when delivery stops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ControlAction;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite plant state after integration: {0}")]
    NonFinite(String),
    #[error("invalid patient profile: {0}")]
    InvalidProfile(String),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

/// Minimal-model parameters for one synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub name: String,
    /// Glucose effectiveness, 1/min.
    pub p1: f64,
    /// Remote-insulin decay, 1/min.
    pub p2: f64,
    /// Insulin sensitivity gain, 1/min^2 per (µU/mL).
    pub p3: f64,
    /// Insulin clearance, 1/min.
    pub n: f64,
    /// Insulin distribution volume, mL.
    pub v_i: f64,
    /// Basal glucose, mg/dL.
    pub g_b: f64,
    /// Basal plasma insulin, µU/mL.
    pub i_b: f64,
    /// IOB single-exponential decay constant, minutes.
    pub iob_time_constant: f64,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("p1", self.p1),
            ("p2", self.p2),
            ("p3", self.p3),
            ("n", self.n),
            ("v_i", self.v_i),
            ("i_b", self.i_b),
            ("iob_time_constant", self.iob_time_constant),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::InvalidProfile(format!("{name} must be > 0")));
            }
        }
        if !(70.0..=180.0).contains(&self.g_b) {
            return Err(SimError::InvalidProfile(format!(
                "g_b {} outside [70, 180]",
                self.g_b
            )));
        }
        Ok(())
    }

    /// Pump rate (U/h) that holds the plant at (G_b, 0, I_b).
    pub fn basal_rate_uh(&self) -> f64 {
        self.n * self.i_b * self.v_i * 60.0 / 1e6
    }

    /// Three bundled profiles spanning slow/typical/fast insulin
    /// sensitivity.
    pub fn bundled() -> Vec<PatientProfile> {
        vec![
            PatientProfile {
                name: "adult-slow".into(),
                p1: 0.0045,
                p2: 0.023,
                p3: 3.2e-6,
                n: 0.09,
                v_i: 12000.0,
                g_b: 150.0,
                i_b: 15.432,
                iob_time_constant: 240.0,
            },
            PatientProfile {
                name: "adult-typical".into(),
                p1: 0.004,
                p2: 0.025,
                p3: 4.2e-6,
                n: 0.09,
                v_i: 12000.0,
                g_b: 140.0,
                i_b: 15.432,
                iob_time_constant: 240.0,
            },
            PatientProfile {
                name: "adult-fast".into(),
                p1: 0.0035,
                p2: 0.027,
                p3: 5.6e-6,
                n: 0.09,
                v_i: 12000.0,
                g_b: 132.0,
                i_b: 15.432,
                iob_time_constant: 240.0,
            },
        ]
    }

    pub fn by_name(name: &str) -> Option<PatientProfile> {
        Self::bundled().into_iter().find(|p| p.name == name)
    }
}

/// Internal plant state behind the observable (BG, IOB) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Plasma glucose, mg/dL.
    pub g: f64,
    /// Remote insulin action, 1/min (relative to basal; may be negative).
    pub x: f64,
    /// Plasma insulin, µU/mL.
    pub i: f64,
    /// Insulin on board above basal, U.
    pub iob: f64,
}

impl PlantState {
    /// Equilibrium state for a profile under its basal rate.
    pub fn equilibrium(profile: &PatientProfile) -> Self {
        Self {
            g: profile.g_b,
            x: 0.0,
            i: profile.i_b,
            iob: 0.0,
        }
    }

    /// Equilibrium shifted to a chosen starting glucose value.
    pub fn at_bg(profile: &PatientProfile, bg: f64) -> Self {
        Self {
            g: bg,
            ..Self::equilibrium(profile)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.g.is_finite() && self.x.is_finite() && self.i.is_finite() && self.iob.is_finite()
    }
}

fn derivatives(p: &PatientProfile, g: f64, x: f64, i: f64, u_uu_per_min: f64) -> (f64, f64, f64) {
    let dg = -p.p1 * (g - p.g_b) - x * g;
    let dx = -p.p2 * x + p.p3 * (i - p.i_b);
    let di = -p.n * i + u_uu_per_min / p.v_i;
    (dg, dx, di)
}

/// IOB decay-plus-delivery update: delivered units land at the start of the
/// interval and the whole pool decays over `dt`.
pub fn iob_after(iob: f64, delivered_units: f64, dt_minutes: f64, tau: f64) -> f64 {
    (iob + delivered_units) * (-dt_minutes / tau).exp()
}

/// Advances the plant by `dt_minutes` under a constant delivery rate,
/// integrating with fixed-step RK4 at sub-steps of at most one minute.
pub fn step(
    state: &PlantState,
    profile: &PatientProfile,
    action: &ControlAction,
    dt_minutes: f64,
) -> Result<PlantState, SimError> {
    step_with_substep(state, profile, action, dt_minutes, 1.0)
}

/// Like [`step`] but with an explicit sub-step ceiling (used by the
/// fine-grained reference runs in tests).
pub fn step_with_substep(
    state: &PlantState,
    profile: &PatientProfile,
    action: &ControlAction,
    dt_minutes: f64,
    max_substep: f64,
) -> Result<PlantState, SimError> {
    if dt_minutes <= 0.0 {
        return Err(SimError::BadStep(dt_minutes));
    }
    let u = action.rate.max(0.0) * 1e6 / 60.0; // U/h -> µU/min
    let n_sub = (dt_minutes / max_substep).ceil().max(1.0) as usize;
    let h = dt_minutes / n_sub as f64;

    let (mut g, mut x, mut i) = (state.g, state.x, state.i);
    for _ in 0..n_sub {
        let (k1g, k1x, k1i) = derivatives(profile, g, x, i, u);
        let (k2g, k2x, k2i) =
            derivatives(profile, g + 0.5 * h * k1g, x + 0.5 * h * k1x, i + 0.5 * h * k1i, u);
        let (k3g, k3x, k3i) =
            derivatives(profile, g + 0.5 * h * k2g, x + 0.5 * h * k2x, i + 0.5 * h * k2i, u);
        let (k4g, k4x, k4i) = derivatives(profile, g + h * k3g, x + h * k3x, i + h * k3i, u);
        g += h / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g);
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        i += h / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
    }
    i = i.max(0.0);

    let delivered_excess =
        (action.rate - profile.basal_rate_uh()).max(0.0) * dt_minutes / 60.0;
    let iob = iob_after(state.iob, delivered_excess, dt_minutes, profile.iob_time_constant);

    let next = PlantState { g, x, i, iob };
    if !next.is_finite() || next.g <= 0.0 {
        return Err(SimError::NonFinite(format!("{next:?}")));
    }
    Ok(next)
}

/// Current insulin on board.
pub fn iob(state: &PlantState) -> f64 {
    state.iob
}

/// Zero-mean Gaussian CGM noise, deterministic per seed.
#[derive(Debug, Clone)]
pub struct SensorNoise {
    std: f64,
    rng: ChaCha8Rng,
}

impl SensorNoise {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Measured BG: exact plasma glucose, plus noise when a model is supplied.
pub fn read_sensor(state: &PlantState, noise: Option<&mut SensorNoise>) -> f64 {
    match noise {
        None => state.g,
        Some(n) => {
            let dist = Normal::new(0.0, n.std).expect("std must be finite and non-negative");
            state.g + dist.sample(&mut n.rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ControlAction;

    fn typical() -> PatientProfile {
        PatientProfile::by_name("adult-typical").unwrap()
    }

    fn basal_action(p: &PatientProfile) -> ControlAction {
        ControlAction::from_rate(p.basal_rate_uh(), p.basal_rate_uh())
    }

    #[test]
    fn profiles_are_valid() {
        for p in PatientProfile::bundled() {
            p.validate().unwrap();
            // Basal rate should be near 1 U/h for these volumes.
            assert!((0.5..2.0).contains(&p.basal_rate_uh()), "{}", p.name);
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        for p in PatientProfile::bundled() {
            let s0 = PlantState::equilibrium(&p);
            let s1 = step(&s0, &p, &basal_action(&p), 60.0).unwrap();
            assert!((s1.g - s0.g).abs() < 1e-9, "{}: G drifted {}", p.name, s1.g - s0.g);
            assert!((s1.x - s0.x).abs() < 1e-12);
            assert!((s1.i - s0.i).abs() < 1e-9);
        }
    }

    #[test]
    fn bolus_above_basal_drops_glucose() {
        let p = typical();
        let mut s = PlantState::equilibrium(&p);
        let high = ControlAction::from_rate(3.0, p.basal_rate_uh());
        let mut last = s.g;
        // Skip the first few minutes while insulin action builds up, then
        // require a strict decrease over the following hour.
        for minute in 0..60 {
            s = step(&s, &p, &high, 1.0).unwrap();
            if minute >= 5 {
                assert!(s.g < last, "G failed to fall at minute {minute}");
            }
            last = s.g;
        }
        assert!(s.g < p.g_b - 5.0);
    }

    #[test]
    fn zero_insulin_rises_above_basal_glucose() {
        let p = typical();
        let mut s = PlantState::equilibrium(&p);
        let off = ControlAction::from_rate(0.0, p.basal_rate_uh());
        for _ in 0..150 {
            s = step(&s, &p, &off, 5.0).unwrap();
        }
        assert!(s.g > p.g_b + 30.0, "expected sustained rise, got {}", s.g);
    }

    /// Reference oracle: an independent RK4 integrator written out against
    /// the model equations directly, run at dt = 0.01 min.
    fn reference_trajectory(
        p: &PatientProfile,
        start: &PlantState,
        rate_uh: f64,
        cycles: usize,
    ) -> Vec<f64> {
        let u = rate_uh * 1e6 / 60.0;
        let f = |g: f64, x: f64, i: f64| {
            (
                -p.p1 * (g - p.g_b) - x * g,
                -p.p2 * x + p.p3 * (i - p.i_b),
                -p.n * i + u / p.v_i,
            )
        };
        let (mut g, mut x, mut i) = (start.g, start.x, start.i);
        let mut out = Vec::with_capacity(cycles);
        let h = 0.01;
        for _ in 0..cycles {
            for _ in 0..((5.0 / h) as usize) {
                let (a1, b1, c1) = f(g, x, i);
                let (a2, b2, c2) = f(g + 0.5 * h * a1, x + 0.5 * h * b1, i + 0.5 * h * c1);
                let (a3, b3, c3) = f(g + 0.5 * h * a2, x + 0.5 * h * b2, i + 0.5 * h * c2);
                let (a4, b4, c4) = f(g + h * a3, x + h * b3, i + h * c3);
                g += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                x += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
                i += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn rk4_matches_fine_reference_within_tolerance() {
        // 150 cycles of insulin cut-off, the stiffest sustained transient.
        for p in PatientProfile::bundled() {
            let start = PlantState::equilibrium(&p);
            let reference = reference_trajectory(&p, &start, 0.0, 150);
            let off = ControlAction::from_rate(0.0, p.basal_rate_uh());
            let mut s = start;
            for (cycle, want) in reference.iter().enumerate() {
                s = step(&s, &p, &off, 5.0).unwrap();
                assert!(
                    (s.g - want).abs() < 0.1,
                    "{}: cycle {cycle}: {} vs reference {want}",
                    p.name,
                    s.g
                );
            }
        }
    }

    #[test]
    fn more_insulin_never_raises_glucose() {
        let p = typical();
        for (lo, hi) in [(0.0, 1.0), (0.5, 1.5), (1.0, 3.0), (0.0, 3.0)] {
            let mut a = PlantState::at_bg(&p, 160.0);
            let mut b = a;
            let act_lo = ControlAction::from_rate(lo, 1.0);
            let act_hi = ControlAction::from_rate(hi, 1.0);
            for cycle in 0..100 {
                a = step(&a, &p, &act_lo, 5.0).unwrap();
                b = step(&b, &p, &act_hi, 5.0).unwrap();
                assert!(
                    b.g <= a.g + 1e-9,
                    "rates ({lo},{hi}): higher dose exceeded lower at cycle {cycle}"
                );
            }
        }
    }

    #[test]
    fn iob_decay_and_delivery() {
        let tau = 240.0;
        assert_eq!(iob_after(0.0, 1.0, 0.0, tau), 1.0);
        let one_tau = iob_after(0.0, 1.0, tau, tau);
        assert!((one_tau - (-1.0f64).exp()).abs() < 1e-12);

        // Monotone decay to zero without delivery, continuous across events.
        let mut iob = 2.0;
        for _ in 0..500 {
            let next = iob_after(iob, 0.0, 5.0, tau);
            assert!(next >= 0.0 && next <= iob);
            iob = next;
        }
        assert!(iob < 1e-3);
    }

    #[test]
    fn iob_tracks_excess_delivery_only() {
        let p = typical();
        let s = PlantState::equilibrium(&p);
        // Pure basal: no IOB accumulation.
        let s1 = step(&s, &p, &basal_action(&p), 5.0).unwrap();
        assert_eq!(s1.iob, 0.0);
        // Above basal: one cycle of (3 - basal) U/h.
        let s2 = step(&s, &p, &ControlAction::from_rate(3.0, 1.0), 5.0).unwrap();
        let expected = (3.0 - p.basal_rate_uh()) * 5.0 / 60.0 * (-5.0f64 / 240.0).exp();
        assert!((s2.iob - expected).abs() < 1e-12);
    }

    #[test]
    fn sensor_noise_is_deterministic_and_calibrated() {
        let p = typical();
        let s = PlantState::equilibrium(&p);
        assert_eq!(read_sensor(&s, None), s.g);

        let mut n1 = SensorNoise::new(42, 2.0);
        let mut n2 = SensorNoise::new(42, 2.0);
        let a: Vec<f64> = (0..100).map(|_| read_sensor(&s, Some(&mut n1))).collect();
        let b: Vec<f64> = (0..100).map(|_| read_sensor(&s, Some(&mut n2))).collect();
        assert_eq!(a, b);

        let mut n = SensorNoise::new(7, 2.0);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| read_sensor(&s, Some(&mut n)) - s.g)
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (samples.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 2.0).abs() < 0.2, "sample std {std}");
    }

    #[test]
    fn rejects_bad_steps() {
        let p = typical();
        let s = PlantState::equilibrium(&p);
        assert!(matches!(
            step(&s, &p, &basal_action(&p), 0.0),
            Err(SimError::BadStep(_))
        ));
    }
}
