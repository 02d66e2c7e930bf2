//! Numeric substrate shared by both branches: ROI pooling, a one-layer tanh
//! encoder, the three online-annotation heads, the two supervised heads,
//! analytic backward passes and SGD with momentum.

mod roi;

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use roi::{roi_pool, IntegralImage};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    /// ROI pooling grid side (S).
    pub pool_size: usize,
    /// Encoder width (d).
    pub hidden: usize,
    /// Foreground classes (C).
    pub classes: usize,
    /// One encoder feeds both branches when true; otherwise each branch owns a copy.
    pub shared_encoder: bool,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.pool_size * self.pool_size * self.channels
    }
}

/// Dense affine map `y = W x + b` with `W` stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { out_dim, in_dim, weight: vec![0.0; out_dim * in_dim], bias: vec![0.0; out_dim] }
    }

    fn xavier<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("finite bound");
        let weight = (0..out_dim * in_dim).map(|_| u.sample(rng)).collect();
        Self { out_dim, in_dim, weight, bias: vec![0.0; out_dim] }
    }

    fn gaussian<R: Rng>(out_dim: usize, in_dim: usize, std: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        let weight = (0..out_dim * in_dim).map(|_| n.sample(rng)).collect();
        Self { out_dim, in_dim, weight, bias: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, (row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and, when given, the input
    /// gradient into `dx`.
    pub fn backward(&self, x: &[f64], dout: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (w, v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dout.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Oam,
    Supervised,
}

/// All trainable tensors. Also used as the gradient and momentum container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Encoder of the annotation branch; shared with the supervised branch
    /// when `sup_encoder` is `None`.
    pub encoder: Linear,
    pub sup_encoder: Option<Linear>,
    /// Proposal-scoring head (`d -> C`), normalized over proposals.
    pub score: Linear,
    /// Classification head (`d -> C+1`, index 0 is background).
    pub cls: Linear,
    /// Regression head (`d -> 4C`).
    pub reg: Linear,
    pub sup_cls: Linear,
    pub sup_reg: Linear,
}

impl Network {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (f, d, c) = (cfg.feature_dim(), cfg.hidden, cfg.classes);
        let encoder = Linear::xavier(d, f, rng);
        let sup_encoder = if cfg.shared_encoder { None } else { Some(Linear::xavier(d, f, rng)) };
        Self {
            encoder,
            sup_encoder,
            score: Linear::gaussian(c, d, 0.01, rng),
            cls: Linear::gaussian(c + 1, d, 0.01, rng),
            reg: Linear::gaussian(4 * c, d, 0.001, rng),
            sup_cls: Linear::gaussian(c + 1, d, 0.01, rng),
            sup_reg: Linear::gaussian(4 * c, d, 0.001, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.out_dim, l.in_dim);
        Self {
            encoder: z(&self.encoder),
            sup_encoder: self.sup_encoder.as_ref().map(z),
            score: z(&self.score),
            cls: z(&self.cls),
            reg: z(&self.reg),
            sup_cls: z(&self.sup_cls),
            sup_reg: z(&self.sup_reg),
        }
    }

    pub fn encoder_for(&self, branch: Branch) -> &Linear {
        match (branch, &self.sup_encoder) {
            (Branch::Supervised, Some(e)) => e,
            _ => &self.encoder,
        }
    }

    pub fn encoder_for_mut(&mut self, branch: Branch) -> &mut Linear {
        match (branch, &mut self.sup_encoder) {
            (Branch::Supervised, Some(e)) => e,
            _ => &mut self.encoder,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![("encoder", &self.encoder)];
        if let Some(e) = &self.sup_encoder {
            v.push(("sup_encoder", e));
        }
        v.extend([
            ("score", &self.score),
            ("cls", &self.cls),
            ("reg", &self.reg),
            ("sup_cls", &self.sup_cls),
            ("sup_reg", &self.sup_reg),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = vec![("encoder", &mut self.encoder)];
        if let Some(e) = &mut self.sup_encoder {
            v.push(("sup_encoder", e));
        }
        v.extend([
            ("score", &mut self.score),
            ("cls", &mut self.cls),
            ("reg", &mut self.reg),
            ("sup_cls", &mut self.sup_cls),
            ("sup_reg", &mut self.sup_reg),
        ]);
        v
    }

    /// Flat view of every value in [`Network::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.values().copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for (_, t) in self.tensors_mut() {
            for v in t.values_mut() {
                *v = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn add_assign(&mut self, other: &Network) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.values().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }
}

/// Trainable parameters together with their momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub net: Network,
    pub velocity: Network,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl ModelParams {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let net = Network::init(&config, rng);
        let velocity = net.zeros_like();
        Self { config, net, velocity }
    }

    pub fn from_network(config: ModelConfig, net: Network) -> Self {
        let velocity = net.zeros_like();
        Self { config, net, velocity }
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`.
    pub fn sgd_step(&mut self, grads: &Network, opt: SgdConfig) {
        let params = self.net.tensors_mut();
        let vel = self.velocity.tensors_mut();
        for (((_, w), (_, v)), (_, g)) in params.into_iter().zip(vel).zip(grads.tensors()) {
            for ((w, v), g) in w.values_mut().zip(v.values_mut()).zip(g.values()) {
                *v = opt.momentum * *v + g + opt.weight_decay * *w;
                *w -= opt.lr * *v;
            }
        }
    }

    fn encode(&self, branch: Branch, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let enc = self.net.encoder_for(branch);
        features
            .iter()
            .map(|x| {
                let mut h = vec![0.0; enc.out_dim];
                enc.forward(x, &mut h);
                h.iter_mut().for_each(|v| *v = v.tanh());
                h
            })
            .collect()
    }

    /// Joint detection module of the annotation branch over one bag of
    /// proposals.
    pub fn oam_forward(&self, features: &[Vec<f64>]) -> OamForward {
        let c = self.classes();
        let b = features.len();
        let hidden = self.encode(Branch::Oam, features);
        let mut score_logits = vec![0.0; b * c];
        let mut cls_logits = vec![0.0; b * (c + 1)];
        let mut reg = vec![0.0; b * 4 * c];
        for (r, h) in hidden.iter().enumerate() {
            self.net.score.forward(h, &mut score_logits[r * c..(r + 1) * c]);
            self.net.cls.forward(h, &mut cls_logits[r * (c + 1)..(r + 1) * (c + 1)]);
            self.net.reg.forward(h, &mut reg[r * 4 * c..(r + 1) * 4 * c]);
        }
        let mut cls_probs = vec![0.0; b * (c + 1)];
        let mut gamma_c = vec![0.0; b * c];
        for r in 0..b {
            let z = &cls_logits[r * (c + 1)..(r + 1) * (c + 1)];
            softmax_into(z, &mut cls_probs[r * (c + 1)..(r + 1) * (c + 1)]);
            // foreground restriction of the C+1 softmax, renormalized
            softmax_into(&z[1..], &mut gamma_c[r * c..(r + 1) * c]);
        }
        let mut gamma_r = vec![0.0; b * c];
        let mut column = vec![0.0; b];
        let mut out = vec![0.0; b];
        for k in 0..c {
            for r in 0..b {
                column[r] = score_logits[r * c + k];
            }
            softmax_into(&column, &mut out);
            for r in 0..b {
                gamma_r[r * c + k] = out[r];
            }
        }
        let phi: Vec<f64> = gamma_c.iter().zip(&gamma_r).map(|(a, b)| a * b).collect();
        let mut alpha = vec![0.0; c];
        for r in 0..b {
            for k in 0..c {
                alpha[k] += phi[r * c + k];
            }
        }
        for a in alpha.iter_mut() {
            *a = a.clamp(0.0, 1.0);
        }
        OamForward {
            classes: c,
            features: features.to_vec(),
            hidden,
            score_logits,
            cls_logits,
            cls_probs,
            reg,
            gamma_c,
            gamma_r,
            phi,
            alpha,
        }
    }

    pub fn supervised_forward(&self, features: &[Vec<f64>]) -> SupForward {
        let c = self.classes();
        let b = features.len();
        let hidden = self.encode(Branch::Supervised, features);
        let mut cls_logits = vec![0.0; b * (c + 1)];
        let mut reg = vec![0.0; b * 4 * c];
        for (r, h) in hidden.iter().enumerate() {
            self.net.sup_cls.forward(h, &mut cls_logits[r * (c + 1)..(r + 1) * (c + 1)]);
            self.net.sup_reg.forward(h, &mut reg[r * 4 * c..(r + 1) * 4 * c]);
        }
        let mut probs = vec![0.0; b * (c + 1)];
        for r in 0..b {
            softmax_into(&cls_logits[r * (c + 1)..(r + 1) * (c + 1)], &mut probs[r * (c + 1)..(r + 1) * (c + 1)]);
        }
        SupForward { classes: c, features: features.to_vec(), hidden, cls_logits, probs, reg }
    }

    /// Back-propagates output gradients of an annotation-branch forward into
    /// `grads`.
    pub fn backward_oam(&self, fwd: &OamForward, dout: &OamOutputGrad, grads: &mut Network) -> Result<()> {
        let c = self.classes();
        let d = self.config.hidden;
        for r in 0..fwd.len() {
            let h = &fwd.hidden[r];
            let mut dh = vec![0.0; d];
            self.net.score.backward(h, &dout.score[r * c..(r + 1) * c], &mut grads.score, Some(&mut dh));
            self.net.cls.backward(h, &dout.cls[r * (c + 1)..(r + 1) * (c + 1)], &mut grads.cls, Some(&mut dh));
            self.net.reg.backward(h, &dout.reg[r * 4 * c..(r + 1) * 4 * c], &mut grads.reg, Some(&mut dh));
            self.backward_encoder(Branch::Oam, &fwd.features[r], h, &dh, grads);
        }
        grads.check_finite()
    }

    pub fn backward_supervised(&self, fwd: &SupForward, dout: &SupOutputGrad, grads: &mut Network) -> Result<()> {
        let c = self.classes();
        let d = self.config.hidden;
        for r in 0..fwd.len() {
            let h = &fwd.hidden[r];
            let mut dh = vec![0.0; d];
            self.net.sup_cls.backward(h, &dout.cls[r * (c + 1)..(r + 1) * (c + 1)], &mut grads.sup_cls, Some(&mut dh));
            self.net.sup_reg.backward(h, &dout.reg[r * 4 * c..(r + 1) * 4 * c], &mut grads.sup_reg, Some(&mut dh));
            self.backward_encoder(Branch::Supervised, &fwd.features[r], h, &dh, grads);
        }
        grads.check_finite()
    }

    fn backward_encoder(&self, branch: Branch, x: &[f64], h: &[f64], dh: &[f64], grads: &mut Network) {
        if dh.iter().all(|g| *g == 0.0) {
            return;
        }
        let da: Vec<f64> = dh.iter().zip(h).map(|(g, h)| g * (1.0 - h * h)).collect();
        self.net.encoder_for(branch).backward(x, &da, grads.encoder_for_mut(branch), None);
    }
}

/// Cached activations of the annotation branch. Per-proposal quantities are
/// stored proposal-major: entry `(class k, proposal r)` lives at `r * C + k`.
#[derive(Debug, Clone)]
pub struct OamForward {
    classes: usize,
    pub features: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub score_logits: Vec<f64>,
    pub cls_logits: Vec<f64>,
    /// Softmax over the `C+1` classification logits.
    pub cls_probs: Vec<f64>,
    pub reg: Vec<f64>,
    /// Softmax over foreground classes, per proposal.
    pub gamma_c: Vec<f64>,
    /// Softmax over proposals, per class.
    pub gamma_r: Vec<f64>,
    pub phi: Vec<f64>,
    /// Image-level class scores `sum_r phi(c, r)`.
    pub alpha: Vec<f64>,
}

impl OamForward {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gamma_c(&self, class: usize, r: usize) -> f64 {
        self.gamma_c[r * self.classes + class]
    }

    pub fn gamma_r(&self, class: usize, r: usize) -> f64 {
        self.gamma_r[r * self.classes + class]
    }

    pub fn phi(&self, class: usize, r: usize) -> f64 {
        self.phi[r * self.classes + class]
    }

    /// `C+1` class probabilities of proposal `r` (index 0 = background).
    pub fn probs(&self, r: usize) -> &[f64] {
        &self.cls_probs[r * (self.classes + 1)..(r + 1) * (self.classes + 1)]
    }

    pub fn log_prob(&self, r: usize, target: usize) -> f64 {
        log_softmax_at(&self.cls_logits[r * (self.classes + 1)..(r + 1) * (self.classes + 1)], target)
    }

    /// Predicted offset of foreground class `class` for proposal `r`.
    pub fn offset(&self, r: usize, class: usize) -> &[f64] {
        let base = r * 4 * self.classes + 4 * class;
        &self.reg[base..base + 4]
    }

    /// Pushes `dL/d alpha` back through the two softmax normalizations and the
    /// Hadamard combination, accumulating into `dout.score` and `dout.cls`.
    pub fn backward_alpha(&self, d_alpha: &[f64], dout: &mut OamOutputGrad) {
        let c = self.classes;
        let b = self.len();
        // d gamma_c(k, r) = d_alpha[k] * gamma_r(k, r), then softmax over classes
        for r in 0..b {
            let gc = &self.gamma_c[r * c..(r + 1) * c];
            let g: Vec<f64> = (0..c).map(|k| d_alpha[k] * self.gamma_r[r * c + k]).collect();
            let dot: f64 = gc.iter().zip(&g).map(|(p, g)| p * g).sum();
            for k in 0..c {
                dout.cls[r * (c + 1) + 1 + k] += gc[k] * (g[k] - dot);
            }
        }
        // d gamma_r(k, r) = d_alpha[k] * gamma_c(k, r), then softmax over proposals
        for k in 0..c {
            if d_alpha[k] == 0.0 {
                continue;
            }
            let dot: f64 = (0..b).map(|r| self.gamma_r[r * c + k] * d_alpha[k] * self.gamma_c[r * c + k]).sum();
            for r in 0..b {
                let gr = self.gamma_r[r * c + k];
                dout.score[r * c + k] += gr * (d_alpha[k] * self.gamma_c[r * c + k] - dot);
            }
        }
    }
}

/// Loss gradients with respect to the annotation-branch head outputs.
#[derive(Debug, Clone)]
pub struct OamOutputGrad {
    pub score: Vec<f64>,
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
}

impl OamOutputGrad {
    pub fn zeros(proposals: usize, classes: usize) -> Self {
        Self {
            score: vec![0.0; proposals * classes],
            cls: vec![0.0; proposals * (classes + 1)],
            reg: vec![0.0; proposals * 4 * classes],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupForward {
    classes: usize,
    pub features: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub cls_logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub reg: Vec<f64>,
}

impl SupForward {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn probs(&self, r: usize) -> &[f64] {
        &self.probs[r * (self.classes + 1)..(r + 1) * (self.classes + 1)]
    }

    pub fn log_prob(&self, r: usize, target: usize) -> f64 {
        log_softmax_at(&self.cls_logits[r * (self.classes + 1)..(r + 1) * (self.classes + 1)], target)
    }

    pub fn offset(&self, r: usize, class: usize) -> &[f64] {
        let base = r * 4 * self.classes + 4 * class;
        &self.reg[base..base + 4]
    }
}

#[derive(Debug, Clone)]
pub struct SupOutputGrad {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
}

impl SupOutputGrad {
    pub fn zeros(proposals: usize, classes: usize) -> Self {
        Self { cls: vec![0.0; proposals * (classes + 1)], reg: vec![0.0; proposals * 4 * classes] }
    }
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Adds the gradient of `-weight * log(max(softmax(z)[target], eps))` with
/// respect to `z` into `dz`.
pub fn weighted_nll_backward(z: &[f64], target: usize, weight: f64, dz: &mut [f64]) {
    if weight == 0.0 || log_softmax_at(z, target) < LOG_EPS.ln() {
        return;
    }
    let mut p = vec![0.0; z.len()];
    softmax_into(z, &mut p);
    for (k, (d, pk)) in dz.iter_mut().zip(&p).enumerate() {
        *d += weight * (pk - if k == target { 1.0 } else { 0.0 });
    }
}

/// `max(log_softmax(z)[target], log eps)`.
pub fn clamped_log_prob(z: &[f64], target: usize) -> f64 {
    log_softmax_at(z, target).max(LOG_EPS.ln())
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    meta: serde_json::Value,
    params: ModelParams,
}

/// JSON checkpoint: `{format, version, meta, params: {config, net, velocity}}`.
/// `meta` carries whatever produced the parameters (config, seed, epoch).
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: serde_json::Value) -> Result<()> {
    let file = CheckpointFile { format: "oamdet-checkpoint".into(), version: CHECKPOINT_VERSION, meta, params: params.clone() };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").cloned().unwrap_or(serde_json::Value::Null);
    if value.get("format").and_then(|f| f.as_str()) != Some("oamdet-checkpoint")
        || version.as_u64() != Some(CHECKPOINT_VERSION as u64)
    {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            expected: "checkpoint",
            want: CHECKPOINT_VERSION,
            found: version.to_string(),
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    Ok((file.params, file.meta))
}
