//! GRU policy network with hand-written reverse-mode gradients, RMSprop and
//! a reduce-on-plateau learning-rate scheduler.
//!
//! Parameters live in one flat vector so the optimizer, gradient
//! accumulation and finite-difference checks all work on plain slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal_log_pdf;

pub const SD_MIN: f64 = 1e-3;
pub const SD_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Offsets {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
    w_tok: usize,
    b_tok: usize,
    w_const: usize,
    b_const: usize,
    total: usize,
}

impl NetShape {
    fn offsets(&self) -> Offsets {
        let (i, h, v) = (self.input, self.hidden, self.vocab);
        let w_ih = 0;
        let w_hh = w_ih + 3 * h * i;
        let b_ih = w_hh + 3 * h * h;
        let b_hh = b_ih + 3 * h;
        let w_tok = b_hh + 3 * h;
        let b_tok = w_tok + v * h;
        let w_const = b_tok + v;
        let b_const = w_const + 2 * h;
        let total = b_const + 2;
        Offsets { w_ih, w_hh, b_ih, b_hh, w_tok, b_tok, w_const, b_const, total }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().total
    }

    /// Named blocks of the flat layout with their shapes.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (i, h, v) = (self.input, self.hidden, self.vocab);
        vec![
            ("gru.weight_ih".into(), vec![3 * h, i]),
            ("gru.weight_hh".into(), vec![3 * h, h]),
            ("gru.bias_ih".into(), vec![3 * h]),
            ("gru.bias_hh".into(), vec![3 * h]),
            ("token_head.weight".into(), vec![v, h]),
            ("token_head.bias".into(), vec![v]),
            ("const_head.weight".into(), vec![2, h]),
            ("const_head.bias".into(), vec![2]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: NetShape,
    off: Offsets,
    pub data: Vec<f64>,
}

/// Forward values of one GRU step kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub input: Vec<f64>,
    pub h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstHead {
    pub mean: f64,
    pub sd: f64,
    clamped: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[r] += sum_c m[r, c] * v[c]` for a row-major `rows x v.len()` block.
fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `out[c] += sum_r m[r, c] * v[r]`.
fn matvec_t_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &s) in m.chunks_exact(cols).zip(v) {
        if s == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * s;
        }
    }
}

/// `m[r, c] += u[r] * v[c]`.
fn outer_add(m: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (row, &s) in m.chunks_exact_mut(cols).zip(u) {
        if s == 0.0 {
            continue;
        }
        for (a, b) in row.iter_mut().zip(v) {
            *a += s * b;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl NetworkParams {
    pub fn zeros(shape: NetShape) -> Self {
        let off = shape.offsets();
        NetworkParams { shape, off, data: vec![0.0; off.total] }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(shape: NetShape, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let o = p.off;
        let weight_blocks = [
            (o.w_ih, o.b_ih),
            (o.w_tok, o.b_tok),
            (o.w_const, o.b_const),
        ];
        for (start, end) in weight_blocks {
            for w in &mut p.data[start..end] {
                *w = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    pub fn from_data(shape: NetShape, data: Vec<f64>) -> Result<Self> {
        let off = shape.offsets();
        if data.len() != off.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", off.total, data.len())));
        }
        Ok(NetworkParams { shape, off, data })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mutable views of the token head, for constructing networks with a
    /// prescribed output distribution.
    pub fn token_head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let o = self.off;
        let (w, rest) = self.data[o.w_tok..o.w_const].split_at_mut(o.b_tok - o.w_tok);
        (w, rest)
    }

    pub fn const_head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let o = self.off;
        let (w, rest) = self.data[o.w_const..o.total].split_at_mut(o.b_const - o.w_const);
        (w, rest)
    }

    pub fn gru_step(&self, input: &[f64], h_prev: &[f64]) -> GruCache {
        let NetShape { input: ni, hidden: nh, .. } = self.shape;
        debug_assert_eq!(input.len(), ni);
        debug_assert_eq!(h_prev.len(), nh);
        let o = self.off;
        let d = &self.data;
        let mut gi = d[o.b_ih..o.b_ih + 3 * nh].to_vec();
        matvec_add(&d[o.w_ih..o.w_hh], input, &mut gi);
        let mut gh = d[o.b_hh..o.b_hh + 3 * nh].to_vec();
        matvec_add(&d[o.w_hh..o.b_ih], h_prev, &mut gh);

        let mut r = vec![0.0; nh];
        let mut z = vec![0.0; nh];
        let mut n = vec![0.0; nh];
        let mut h = vec![0.0; nh];
        for k in 0..nh {
            r[k] = sigmoid(gi[k] + gh[k]);
            z[k] = sigmoid(gi[nh + k] + gh[nh + k]);
            n[k] = (gi[2 * nh + k] + r[k] * gh[2 * nh + k]).tanh();
            h[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
        }
        GruCache {
            input: input.to_vec(),
            h_prev: h_prev.to_vec(),
            r,
            z,
            n,
            gh_n: gh[2 * nh..].to_vec(),
            h,
        }
    }

    /// Accumulates parameter gradients for one step and returns `dL/dh_prev`.
    pub fn gru_backward(&self, cache: &GruCache, dh: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let nh = self.shape.hidden;
        let o = self.off;
        let mut d_gi = vec![0.0; 3 * nh];
        let mut d_gh = vec![0.0; 3 * nh];
        let mut dh_prev = vec![0.0; nh];
        for k in 0..nh {
            let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
            let dn = dh[k] * (1.0 - z);
            let dz = dh[k] * (cache.h_prev[k] - n);
            dh_prev[k] = dh[k] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * cache.gh_n[k];
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            d_gi[k] = dr_pre;
            d_gi[nh + k] = dz_pre;
            d_gi[2 * nh + k] = dn_pre;
            d_gh[k] = dr_pre;
            d_gh[nh + k] = dz_pre;
            d_gh[2 * nh + k] = dn_pre * r;
        }
        outer_add(&mut grad[o.w_ih..o.w_hh], &d_gi, &cache.input);
        outer_add(&mut grad[o.w_hh..o.b_ih], &d_gh, &cache.h_prev);
        add_into(&mut grad[o.b_ih..o.b_ih + 3 * nh], &d_gi);
        add_into(&mut grad[o.b_hh..o.b_hh + 3 * nh], &d_gh);
        matvec_t_add(&self.data[o.w_hh..o.b_ih], &d_gh, &mut dh_prev);
        dh_prev
    }

    pub fn token_logits(&self, h: &[f64]) -> Vec<f64> {
        let o = self.off;
        let mut logits = self.data[o.b_tok..o.w_const].to_vec();
        matvec_add(&self.data[o.w_tok..o.b_tok], h, &mut logits);
        logits
    }

    /// Backward through the token head; `dlogits` is `dL/dlogits`.
    fn token_head_backward(&self, h: &[f64], dlogits: &[f64], grad: &mut [f64], dh: &mut [f64]) {
        let o = self.off;
        outer_add(&mut grad[o.w_tok..o.b_tok], dlogits, h);
        add_into(&mut grad[o.b_tok..o.w_const], dlogits);
        matvec_t_add(&self.data[o.w_tok..o.b_tok], dlogits, dh);
    }

    pub fn const_head(&self, h: &[f64]) -> ConstHead {
        let o = self.off;
        let mut out = self.data[o.b_const..o.total].to_vec();
        matvec_add(&self.data[o.w_const..o.b_const], h, &mut out);
        let raw_sd = out[1].exp();
        let sd = raw_sd.clamp(SD_MIN, SD_MAX);
        ConstHead { mean: out[0], sd, clamped: sd != raw_sd || !raw_sd.is_finite() }
    }

    fn const_head_backward(&self, h: &[f64], d_mean: f64, d_raw: f64, grad: &mut [f64], dh: &mut [f64]) {
        let o = self.off;
        let d = [d_mean, d_raw];
        outer_add(&mut grad[o.w_const..o.b_const], &d, h);
        add_into(&mut grad[o.b_const..o.total], &d);
        matvec_t_add(&self.data[o.w_const..o.b_const], &d, dh);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: Checkpoint::VERSION,
            shape: self.shape,
            manifest: self.shape.manifest(),
            data: self.data.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != Checkpoint::VERSION {
            return Err(Error::Shape(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.manifest != ck.shape.manifest() {
            return Err(Error::Shape("checkpoint manifest does not match its shape".into()));
        }
        Self::from_data(ck.shape, ck.data.clone())
    }
}

/// Versioned parameter dump with a shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub shape: NetShape,
    pub manifest: Vec<(String, Vec<usize>)>,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;
}

/// Log-probabilities of a softmax restricted to `mask`; masked entries are
/// `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// One recorded decision of a rollout: the network input, the mask over the
/// library, the chosen token and the constant value if one was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub input: Vec<f64>,
    pub mask: Vec<bool>,
    pub choice: usize,
    pub constant: Option<f64>,
}

#[derive(Debug, Clone)]
struct TapeStep {
    gru: GruCache,
    probs: Vec<f64>,
    choice: usize,
    constant: Option<(f64, ConstHead)>,
}

/// Forward record of one rollout sufficient to backpropagate `log q`.
#[derive(Debug, Clone)]
pub struct GradientTape {
    steps: Vec<TapeStep>,
}

/// Teacher-forced `log q` of a recorded rollout and its gradient tape.
pub fn log_prob_and_tape(params: &NetworkParams, steps: &[StepRecord]) -> Result<(f64, GradientTape)> {
    let mut h = vec![0.0; params.shape.hidden];
    let mut log_q = 0.0;
    let mut tape = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        if !s.mask.get(s.choice).copied().unwrap_or(false) {
            return Err(Error::Unreachable { step: i });
        }
        let gru = params.gru_step(&s.input, &h);
        let logp = masked_log_softmax(&params.token_logits(&gru.h), &s.mask);
        log_q += logp[s.choice];
        let constant = s.constant.map(|c| {
            let head = params.const_head(&gru.h);
            log_q += normal_log_pdf(c, head.mean, head.sd);
            (c, head)
        });
        h = gru.h.clone();
        tape.push(TapeStep { probs: logp.iter().map(|l| l.exp()).collect(), gru, choice: s.choice, constant });
    }
    Ok((log_q, GradientTape { steps: tape }))
}

impl GradientTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `grad += weight * d(log q)/d(params)`.
    pub fn accumulate(&self, params: &NetworkParams, weight: f64, grad: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        let nh = params.shape.hidden;
        let mut dh_next = vec![0.0; nh];
        for step in self.steps.iter().rev() {
            let mut dh = dh_next;
            let dlogits: Vec<f64> = step
                .probs
                .iter()
                .enumerate()
                .map(|(j, &p)| weight * (f64::from(u8::from(j == step.choice)) - p))
                .collect();
            params.token_head_backward(&step.gru.h, &dlogits, grad, &mut dh);
            if let Some((c, head)) = step.constant {
                let z = (c - head.mean) / head.sd;
                let d_mean = weight * z / head.sd;
                let d_raw = if head.clamped { 0.0 } else { weight * (z * z - 1.0) };
                params.const_head_backward(&step.gru.h, d_mean, d_raw, grad, &mut dh);
            }
            dh_next = params.gru_backward(&step.gru, &dh, grad);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { lr: 1e-2, alpha: 0.9, eps: 1e-6 }
    }
}

/// RMSprop with the square-root-then-epsilon denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub square_avg: Vec<f64>,
    pub skipped_steps: usize,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, n_params: usize) -> Self {
        RmsProp { lr: cfg.lr, alpha: cfg.alpha, eps: cfg.eps, square_avg: vec![0.0; n_params], skipped_steps: 0 }
    }

    /// Descent step on `params` along `grad`. A non-finite gradient skips the
    /// step and returns `false`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> bool {
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped_steps += 1;
            log::warn!("non-finite gradient, optimizer step skipped ({} so far)", self.skipped_steps);
            return false;
        }
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.square_avg.iter_mut()) {
            *v = self.alpha * *v + (1.0 - self.alpha) * g * g;
            *p -= self.lr * g / (v.sqrt() + self.eps);
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 15, min_lr: 1e-6, threshold: 1e-4 }
    }
}

/// Reduce-on-plateau in `min` mode with a relative threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub cfg: PlateauConfig,
    pub best: f64,
    pub bad_epochs: usize,
}

impl ReduceOnPlateau {
    const MIN_DELTA: f64 = 1e-8;

    pub fn new(cfg: PlateauConfig) -> Self {
        ReduceOnPlateau { cfg, best: f64::INFINITY, bad_epochs: 0 }
    }

    fn improves(&self, metric: f64) -> bool {
        if self.best == f64::INFINITY {
            return true;
        }
        metric < self.best - self.cfg.threshold * self.best.abs()
    }

    /// Feeds one epoch's metric; returns the (possibly reduced) learning rate.
    pub fn update(&mut self, metric: f64, lr: f64) -> f64 {
        if !metric.is_finite() {
            return lr;
        }
        if self.improves(metric) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.cfg.patience {
            self.bad_epochs = 0;
            let new_lr = (lr * self.cfg.factor).max(self.cfg.min_lr);
            if lr - new_lr > Self::MIN_DELTA {
                return new_lr;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> NetShape {
        NetShape { input: 5, hidden: 4, vocab: 3 }
    }

    #[test]
    fn zero_network_keeps_zero_hidden() {
        let p = NetworkParams::zeros(shape());
        let c = p.gru_step(&[0.0; 5], &[0.0; 4]);
        assert_eq!(c.h, vec![0.0; 4]);
    }

    /// Independent GRU evaluation written directly from the gate equations.
    fn reference_gru(p: &NetworkParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let NetShape { input: ni, hidden: nh, .. } = p.shape();
        let d = &p.data;
        let w_ih = |g: usize, k: usize, j: usize| d[(g * nh + k) * ni + j];
        let w_hh = |g: usize, k: usize, j: usize| d[3 * nh * ni + (g * nh + k) * nh + j];
        let b_ih = |g: usize, k: usize| d[3 * nh * ni + 3 * nh * nh + g * nh + k];
        let b_hh = |g: usize, k: usize| d[3 * nh * ni + 3 * nh * nh + 3 * nh + g * nh + k];
        let lin = |g: usize, k: usize| -> (f64, f64) {
            let a: f64 = (0..ni).map(|j| w_ih(g, k, j) * x[j]).sum::<f64>() + b_ih(g, k);
            let b: f64 = (0..nh).map(|j| w_hh(g, k, j) * h[j]).sum::<f64>() + b_hh(g, k);
            (a, b)
        };
        (0..nh)
            .map(|k| {
                let (ar, br) = lin(0, k);
                let (az, bz) = lin(1, k);
                let (an, bn) = lin(2, k);
                let r = 1.0 / (1.0 + (-(ar + br)).exp());
                let z = 1.0 / (1.0 + (-(az + bz)).exp());
                let n = (an + r * bn).tanh();
                (1.0 - z) * n + z * h[k]
            })
            .collect()
    }

    #[test]
    fn gru_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut p = NetworkParams::init_uniform(shape(), 0.8, &mut rng);
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = p.gru_step(&x, &h).h;
            let b = reference_gru(&p, &x, &h);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
            assert_eq!(p.gru_step(&x, &h).h, a);
        }
    }

    #[test]
    fn masked_softmax_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            let k = rng.gen_range(0..n);
            mask[k] = true;
            let lp = masked_log_softmax(&logits, &mask);
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (l, m) in lp.iter().zip(&mask) {
                if !m {
                    assert_eq!(l.exp(), 0.0);
                }
            }
        }
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn single_allowed_token_has_log_prob_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NetworkParams::init_uniform(shape(), 0.5, &mut rng);
        let steps = vec![StepRecord { input: one_hot(5, 0), mask: vec![false, true, false], choice: 1, constant: None }];
        let (lq, _) = log_prob_and_tape(&p, &steps).unwrap();
        assert_eq!(lq, 0.0);
    }

    #[test]
    fn uniform_logits_two_tokens() {
        let p = NetworkParams::zeros(shape());
        let steps = vec![
            StepRecord { input: one_hot(5, 0), mask: vec![true, true, false], choice: 0, constant: None },
            StepRecord { input: one_hot(5, 1), mask: vec![false, true, true], choice: 2, constant: None },
        ];
        let (lq, _) = log_prob_and_tape(&p, &steps).unwrap();
        assert!((lq - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_choice_is_rejected() {
        let p = NetworkParams::zeros(shape());
        let steps = vec![StepRecord { input: one_hot(5, 0), mask: vec![true, false, true], choice: 1, constant: None }];
        assert!(matches!(log_prob_and_tape(&p, &steps), Err(Error::Unreachable { step: 0 })));
    }

    #[test]
    fn tape_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = NetworkParams::init_uniform(shape(), 0.5, &mut rng);
        let steps = vec![
            StepRecord { input: one_hot(5, 4), mask: vec![true, true, true], choice: 2, constant: Some(0.4) },
            StepRecord { input: vec![0.0, 1.0, 0.0, 0.0, 0.4], mask: vec![true, false, true], choice: 0, constant: None },
            StepRecord { input: one_hot(5, 3), mask: vec![true, true, true], choice: 2, constant: Some(-1.2) },
        ];
        let (_, tape) = log_prob_and_tape(&p, &steps).unwrap();
        let mut grad = vec![0.0; p.len()];
        tape.accumulate(&p, 1.0, &mut grad);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.data[i] += h;
            let mut b = p.clone();
            b.data[i] -= h;
            let fd = (log_prob_and_tape(&a, &steps).unwrap().0 - log_prob_and_tape(&b, &steps).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs tape {}", grad[i]);
        }
    }

    #[test]
    fn tape_is_linear_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NetworkParams::init_uniform(shape(), 0.5, &mut rng);
        let steps = vec![
            StepRecord { input: one_hot(5, 0), mask: vec![true, true, true], choice: 1, constant: None },
            StepRecord { input: one_hot(5, 1), mask: vec![true, true, true], choice: 0, constant: Some(0.7) },
        ];
        let (_, tape) = log_prob_and_tape(&p, &steps).unwrap();
        let mut g1 = vec![0.0; p.len()];
        tape.accumulate(&p, 1.0, &mut g1);
        tape.accumulate(&p, 1.0, &mut g1);
        let mut g2 = vec![0.0; p.len()];
        tape.accumulate(&p, 2.0, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sd_is_clamped() {
        let mut p = NetworkParams::zeros(shape());
        p.const_head_mut().1[1] = 50.0;
        assert_eq!(p.const_head(&[0.0; 4]).sd, SD_MAX);
        p.const_head_mut().1[1] = -50.0;
        assert_eq!(p.const_head(&[0.0; 4]).sd, SD_MIN);
    }

    #[test]
    fn rmsprop_zero_gradient_is_noop() {
        let mut opt = RmsProp::new(RmsPropConfig::default(), 3);
        let mut p = vec![0.5, -1.0, 2.0];
        opt.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn rmsprop_hand_computed_step() {
        let mut opt = RmsProp::new(RmsPropConfig { lr: 0.01, alpha: 0.9, eps: 1e-6 }, 2);
        opt.square_avg = vec![0.04, 1.0];
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[0.3, -2.0]);
        let v0: f64 = 0.9 * 0.04 + 0.1 * 0.09;
        let v1: f64 = 0.9 * 1.0 + 0.1 * 4.0;
        let e0 = 1.0 - 0.01 * 0.3 / (v0.sqrt() + 1e-6);
        let e1 = 2.0 + 0.01 * 2.0 / (v1.sqrt() + 1e-6);
        assert!((p[0] - e0).abs() < 1e-12);
        assert!((p[1] - e1).abs() < 1e-12);
        assert!((opt.square_avg[0] - v0).abs() < 1e-15 && (opt.square_avg[1] - v1).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_constant_gradient_fixed_point() {
        let cfg = RmsPropConfig { lr: 0.01, alpha: 0.9, eps: 1e-6 };
        let mut opt = RmsProp::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        let g = [0.5, -3.0];
        for _ in 0..400 {
            let before = p.clone();
            opt.step(&mut p, &g);
            if opt.square_avg[0] > 0.0 {
                let step0 = before[0] - p[0];
                let step1 = before[1] - p[1];
                // after convergence the step is lr * sign(g)
                if opt.square_avg[0] > 0.9999 * 0.25 {
                    assert!((step0 - 0.01).abs() < 1e-5);
                    assert!((step1 + 0.01).abs() < 1e-5);
                }
            }
        }
        assert!((opt.square_avg[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_skips_non_finite() {
        let mut opt = RmsProp::new(RmsPropConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        assert!(!opt.step(&mut p, &[f64::NAN, 0.0]));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.skipped_steps, 1);
        assert_eq!(opt.square_avg, vec![0.0, 0.0]);
    }

    #[test]
    fn plateau_never_reduces_while_improving() {
        let mut s = ReduceOnPlateau::new(PlateauConfig::default());
        let mut lr = 1e-2;
        for i in 0..200 {
            lr = s.update(100.0 - i as f64, lr);
        }
        assert_eq!(lr, 1e-2);
    }

    #[test]
    fn plateau_halves_once_after_patience() {
        let cfg = PlateauConfig { patience: 15, ..PlateauConfig::default() };
        let mut s = ReduceOnPlateau::new(cfg);
        let mut lr = s.update(5.0, 1e-2);
        for _ in 0..cfg.patience {
            lr = s.update(5.0, lr);
        }
        assert_eq!(lr, 1e-2);
        lr = s.update(5.0, lr);
        assert_eq!(lr, 5e-3);
        for _ in 0..cfg.patience {
            lr = s.update(5.0, lr);
        }
        assert_eq!(lr, 5e-3);
    }

    #[test]
    fn plateau_clamps_at_min_lr() {
        let cfg = PlateauConfig { patience: 0, min_lr: 1e-6, ..PlateauConfig::default() };
        let mut s = ReduceOnPlateau::new(cfg);
        let mut lr = 1e-2;
        let mut prev = lr;
        for _ in 0..100 {
            lr = s.update(1.0, lr);
            assert!(lr <= prev);
            assert!(lr >= 1e-6);
            prev = lr;
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NetworkParams::init_uniform(shape(), 0.08, &mut rng);
        let json = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(NetworkParams::from_checkpoint(&ck).unwrap(), p);
        let mut bad = ck.clone();
        bad.data.pop();
        assert!(NetworkParams::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn init_is_bounded_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = NetShape { input: 7, hidden: 6, vocab: 5 };
        let p = NetworkParams::init_uniform(s, 0.08, &mut rng);
        assert!(p.data.iter().all(|v| v.abs() <= 0.08));
        let o = s.offsets();
        assert!(p.data[o.b_ih..o.w_tok].iter().all(|&v| v == 0.0));
        assert!(p.data[o.b_tok..o.w_const].iter().all(|&v| v == 0.0));
        assert!(p.data[o.b_const..].iter().all(|&v| v == 0.0));
    }
}
