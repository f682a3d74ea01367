//! Small gated recurrent networks with hand-derived backpropagation.
//!
//! Two architectures are built from the same GRU cell: an encoder-decoder
//! for multi-step state prediction and a same-length sequence regressor
//! for action generation. No external ML runtime: the custom losses need
//! direct access to per-output gradients, and the models are small enough
//! (tens of thousands of parameters) that plain f64 loops are fast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("window length {got} does not match the configured {want}")]
    WindowMismatch { got: usize, want: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
}

/// Dense parameter matrix (row-major) with its gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Tensor {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            grad: vec![0.0; rows * cols],
        }
    }

    /// Restores invariants after deserialization (grad is skipped).
    fn ensure_grad(&mut self) {
        if self.grad.len() != self.data.len() {
            self.grad = vec![0.0; self.data.len()];
        }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out[r] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * y[r];
            }
        }
    }

    fn outer_add(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let row = &mut self.grad[r * self.cols..(r + 1) * self.cols];
            for (g, v) in row.iter_mut().zip(x) {
                *g += y[r] * v;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard GRU cell:
/// ```text
/// z = sigmoid(Wz x + Uz h + bz)
/// r = sigmoid(Wr x + Ur h + br)
/// c = tanh(Wc x + Uc (r .* h) + bc)
/// h' = (1 - z) .* h + z .* c
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    wz: Tensor,
    uz: Tensor,
    bz: Tensor,
    wr: Tensor,
    ur: Tensor,
    br: Tensor,
    wc: Tensor,
    uc: Tensor,
    bc: Tensor,
}

/// Per-step values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
}

impl GruCell {
    fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input,
            hidden,
            wz: Tensor::xavier(hidden, input, rng),
            uz: Tensor::xavier(hidden, hidden, rng),
            bz: Tensor::zeros(hidden, 1),
            wr: Tensor::xavier(hidden, input, rng),
            ur: Tensor::xavier(hidden, hidden, rng),
            br: Tensor::zeros(hidden, 1),
            wc: Tensor::xavier(hidden, input, rng),
            uc: Tensor::xavier(hidden, hidden, rng),
            bc: Tensor::zeros(hidden, 1),
        }
    }

    fn forward(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruCache) {
        let n = self.hidden;
        let mut az = self.bz.data.clone();
        self.wz.matvec(x, &mut az);
        self.uz.matvec(h_prev, &mut az);
        let z: Vec<f64> = az.iter().map(|&v| sigmoid(v)).collect();

        let mut ar = self.br.data.clone();
        self.wr.matvec(x, &mut ar);
        self.ur.matvec(h_prev, &mut ar);
        let r: Vec<f64> = ar.iter().map(|&v| sigmoid(v)).collect();

        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let mut ac = self.bc.data.clone();
        self.wc.matvec(x, &mut ac);
        self.uc.matvec(&rh, &mut ac);
        let c: Vec<f64> = ac.iter().map(|&v| v.tanh()).collect();

        let mut h = vec![0.0; n];
        for i in 0..n {
            h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
        }
        (
            h,
            GruCache {
                x: x.to_vec(),
                h_prev: h_prev.to_vec(),
                z,
                r,
                c,
            },
        )
    }

    /// Accumulates parameter gradients and returns (dL/dx, dL/dh_prev).
    fn backward(&mut self, cache: &GruCache, dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.hidden;
        let GruCache { x, h_prev, z, r, c } = cache;

        let mut dz = vec![0.0; n];
        let mut dc = vec![0.0; n];
        let mut dh_prev = vec![0.0; n];
        for i in 0..n {
            dz[i] = dh[i] * (c[i] - h_prev[i]);
            dc[i] = dh[i] * z[i];
            dh_prev[i] = dh[i] * (1.0 - z[i]);
        }

        // Candidate path.
        let dac: Vec<f64> = dc.iter().zip(c).map(|(d, cv)| d * (1.0 - cv * cv)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        self.wc.outer_add(&dac, x);
        self.uc.outer_add(&dac, &rh);
        for (g, d) in self.bc.grad.iter_mut().zip(&dac) {
            *g += d;
        }
        let mut drh = vec![0.0; n];
        self.uc.matvec_t_add(&dac, &mut drh);
        let mut dr = vec![0.0; n];
        for i in 0..n {
            dr[i] = drh[i] * h_prev[i];
            dh_prev[i] += drh[i] * r[i];
        }
        let mut dx = vec![0.0; self.input];
        self.wc.matvec_t_add(&dac, &mut dx);

        // Update gate.
        let daz: Vec<f64> = dz.iter().zip(z).map(|(d, zv)| d * zv * (1.0 - zv)).collect();
        self.wz.outer_add(&daz, x);
        self.uz.outer_add(&daz, h_prev);
        for (g, d) in self.bz.grad.iter_mut().zip(&daz) {
            *g += d;
        }
        self.wz.matvec_t_add(&daz, &mut dx);
        self.uz.matvec_t_add(&daz, &mut dh_prev);

        // Reset gate.
        let dar: Vec<f64> = dr.iter().zip(r).map(|(d, rv)| d * rv * (1.0 - rv)).collect();
        self.wr.outer_add(&dar, x);
        self.ur.outer_add(&dar, h_prev);
        for (g, d) in self.br.grad.iter_mut().zip(&dar) {
            *g += d;
        }
        self.wr.matvec_t_add(&dar, &mut dx);
        self.ur.matvec_t_add(&dar, &mut dh_prev);

        (dx, dh_prev)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wc,
            &mut self.uc,
            &mut self.bc,
        ]
    }
}

/// Autoregressive encoder-decoder: two stacked GRU layers over the input
/// window, two stacked GRU layers unrolled for the horizon with the
/// previous output fed back, and a linear readout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seq2Seq {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: (usize, usize),
    enc1: GruCell,
    enc2: GruCell,
    dec1: GruCell,
    dec2: GruCell,
    w_out: Tensor,
    b_out: Tensor,
}

pub struct Seq2SeqPass {
    enc1_caches: Vec<GruCache>,
    enc2_caches: Vec<GruCache>,
    dec1_caches: Vec<GruCache>,
    dec2_caches: Vec<GruCache>,
    d2_states: Vec<Vec<f64>>,
    /// Network outputs per horizon step (normalized space).
    pub ys: Vec<Vec<f64>>,
}

impl Seq2Seq {
    pub fn new(input_dim: usize, output_dim: usize, hidden: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            input_dim,
            output_dim,
            hidden,
            enc1: GruCell::new(input_dim, hidden.0, &mut rng),
            enc2: GruCell::new(hidden.0, hidden.1, &mut rng),
            dec1: GruCell::new(output_dim, hidden.0, &mut rng),
            dec2: GruCell::new(hidden.0, hidden.1, &mut rng),
            w_out: Tensor::xavier(output_dim, hidden.1, &mut rng),
            b_out: Tensor::zeros(output_dim, 1),
        }
    }

    pub fn forward(&self, window: &[Vec<f64>], y0: &[f64], horizon: usize) -> Seq2SeqPass {
        let mut h1 = vec![0.0; self.hidden.0];
        let mut h2 = vec![0.0; self.hidden.1];
        let mut enc1_caches = Vec::with_capacity(window.len());
        let mut enc2_caches = Vec::with_capacity(window.len());
        for x in window {
            let (h, c) = self.enc1.forward(x, &h1);
            h1 = h;
            enc1_caches.push(c);
            let (h, c) = self.enc2.forward(&h1, &h2);
            h2 = h;
            enc2_caches.push(c);
        }

        let mut dec1_caches = Vec::with_capacity(horizon);
        let mut dec2_caches = Vec::with_capacity(horizon);
        let mut d2_states = Vec::with_capacity(horizon);
        let mut ys = Vec::with_capacity(horizon);
        let mut y_prev = y0.to_vec();
        for _ in 0..horizon {
            let (d1, c) = self.dec1.forward(&y_prev, &h1);
            h1 = d1;
            dec1_caches.push(c);
            let (d2, c) = self.dec2.forward(&h1, &h2);
            h2 = d2;
            dec2_caches.push(c);
            let mut y = self.b_out.data.clone();
            self.w_out.matvec(&h2, &mut y);
            d2_states.push(h2.clone());
            y_prev = y.clone();
            ys.push(y);
        }

        Seq2SeqPass {
            enc1_caches,
            enc2_caches,
            dec1_caches,
            dec2_caches,
            d2_states,
            ys,
        }
    }

    /// Backpropagates per-output gradients `dys` (one per horizon step)
    /// through the decoder, the feedback path, and the encoder.
    pub fn backward(&mut self, pass: &Seq2SeqPass, dys: &[Vec<f64>]) {
        let horizon = pass.ys.len();
        debug_assert_eq!(dys.len(), horizon);
        let mut gd1 = vec![0.0; self.hidden.0];
        let mut gd2 = vec![0.0; self.hidden.1];
        let mut gy_next = vec![0.0; self.output_dim];

        for i in (0..horizon).rev() {
            let gy: Vec<f64> = dys[i].iter().zip(&gy_next).map(|(a, b)| a + b).collect();
            self.w_out.outer_add(&gy, &pass.d2_states[i]);
            for (g, d) in self.b_out.grad.iter_mut().zip(&gy) {
                *g += d;
            }
            self.w_out.matvec_t_add(&gy, &mut gd2);

            let (dx2, gh2_prev) = self.dec2.backward(&pass.dec2_caches[i], &gd2);
            for (a, b) in gd1.iter_mut().zip(&dx2) {
                *a += b;
            }
            gd2 = gh2_prev;

            let (dx1, gh1_prev) = self.dec1.backward(&pass.dec1_caches[i], &gd1);
            gy_next = dx1;
            gd1 = gh1_prev;
        }

        for t in (0..pass.enc1_caches.len()).rev() {
            let (dx2, gh2_prev) = self.enc2.backward(&pass.enc2_caches[t], &gd2);
            for (a, b) in gd1.iter_mut().zip(&dx2) {
                *a += b;
            }
            gd2 = gh2_prev;
            let (_dx1, gh1_prev) = self.enc1.backward(&pass.enc1_caches[t], &gd1);
            gd1 = gh1_prev;
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.enc1.tensors_mut();
        v.extend(self.enc2.tensors_mut());
        v.extend(self.dec1.tensors_mut());
        v.extend(self.dec2.tensors_mut());
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    pub fn ensure_grads(&mut self) {
        for t in self.tensors_mut() {
            t.ensure_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.tensors_mut().iter().map(|t| t.data.len()).sum()
    }
}

/// Same-length sequence regressor: two stacked GRU layers with a linear
/// readout at every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqRegressor {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: (usize, usize),
    gru1: GruCell,
    gru2: GruCell,
    w_out: Tensor,
    b_out: Tensor,
}

pub struct SeqRegressorPass {
    c1: Vec<GruCache>,
    c2: Vec<GruCache>,
    h2_states: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
}

impl SeqRegressor {
    pub fn new(input_dim: usize, output_dim: usize, hidden: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            input_dim,
            output_dim,
            hidden,
            gru1: GruCell::new(input_dim, hidden.0, &mut rng),
            gru2: GruCell::new(hidden.0, hidden.1, &mut rng),
            w_out: Tensor::xavier(output_dim, hidden.1, &mut rng),
            b_out: Tensor::zeros(output_dim, 1),
        }
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> SeqRegressorPass {
        let mut h1 = vec![0.0; self.hidden.0];
        let mut h2 = vec![0.0; self.hidden.1];
        let mut c1 = Vec::with_capacity(xs.len());
        let mut c2 = Vec::with_capacity(xs.len());
        let mut h2_states = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let (h, c) = self.gru1.forward(x, &h1);
            h1 = h;
            c1.push(c);
            let (h, c) = self.gru2.forward(&h1, &h2);
            h2 = h;
            c2.push(c);
            let mut y = self.b_out.data.clone();
            self.w_out.matvec(&h2, &mut y);
            h2_states.push(h2.clone());
            ys.push(y);
        }
        SeqRegressorPass { c1, c2, h2_states, ys }
    }

    pub fn backward(&mut self, pass: &SeqRegressorPass, dys: &[Vec<f64>]) {
        let mut gh1 = vec![0.0; self.hidden.0];
        let mut gh2 = vec![0.0; self.hidden.1];
        for t in (0..pass.ys.len()).rev() {
            let gy = &dys[t];
            self.w_out.outer_add(gy, &pass.h2_states[t]);
            for (g, d) in self.b_out.grad.iter_mut().zip(gy) {
                *g += d;
            }
            self.w_out.matvec_t_add(gy, &mut gh2);
            let (dx2, gh2_prev) = self.gru2.backward(&pass.c2[t], &gh2);
            for (a, b) in gh1.iter_mut().zip(&dx2) {
                *a += b;
            }
            gh2 = gh2_prev;
            let (_dx1, gh1_prev) = self.gru1.backward(&pass.c1[t], &gh1);
            gh1 = gh1_prev;
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gru1.tensors_mut();
        v.extend(self.gru2.tensors_mut());
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    pub fn ensure_grads(&mut self) {
        for t in self.tensors_mut() {
            t.ensure_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.tensors_mut().iter().map(|t| t.data.len()).sum()
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, tensors: &mut [&mut Tensor]) {
        if self.m.len() != tensors.len() {
            self.m = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
            self.v = tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        }
        self.step += 1;

        let norm: f64 = tensors
            .iter()
            .flat_map(|t| t.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, t) in tensors.iter_mut().enumerate() {
            for i in 0..t.data.len() {
                let g = t.grad[i] * scale;
                self.m[idx][i] = self.beta1 * self.m[idx][i] + (1.0 - self.beta1) * g;
                self.v[idx][i] = self.beta2 * self.v[idx][i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[idx][i] / bc1;
                let vhat = self.v[idx][i] / bc2;
                t.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn zero_grads(tensors: &mut [&mut Tensor]) {
    for t in tensors {
        t.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
