//! Minimal differentiable scoring network: a shared per-candidate MLP encoder
//! with a behavior-policy head and a Q head, exact reverse-mode gradients,
//! bias-corrected Adam, and a versioned binary checkpoint format.
//!
//! Parameters live in one flat `Vec<f64>` so checksums, checkpoints, Adam
//! moments, and finite-difference probes all address the same coordinates.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::Checksum;
use crate::episode::{Transition, N_FEATURES};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGrad { index: usize },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Architecture dimensions: input feature width and hidden layer width
/// (both encoder layers share the hidden width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: N_FEATURES,
            hidden_dim: 64,
        }
    }
}

impl NetConfig {
    fn w1(&self) -> Range<usize> {
        0..self.hidden_dim * self.input_dim
    }
    fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden_dim
    }
    fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden_dim * self.hidden_dim
    }
    fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.hidden_dim
    }
    fn wp(&self) -> Range<usize> {
        let s = self.b2().end;
        s..s + self.hidden_dim
    }
    fn bp(&self) -> usize {
        self.wp().end
    }
    fn wq(&self) -> Range<usize> {
        let s = self.bp() + 1;
        s..s + self.hidden_dim
    }
    fn bq(&self) -> usize {
        self.wq().end
    }

    /// Coordinate range of the Q head (weights + bias) at the tail of the
    /// flat parameter vector; everything before it is the shared encoder and
    /// the behavior head.
    pub fn q_head_span(&self) -> Range<usize> {
        self.wq().start..self.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.bq() + 1
    }
}

/// All network parameters as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    cfg: NetConfig,
    data: Vec<f64>,
}

impl ParamSet {
    /// Zero-initialized parameters (useful for closed-form head tests).
    pub fn zeros(cfg: NetConfig) -> Self {
        ParamSet {
            cfg,
            data: vec![0.0; cfg.n_params()],
        }
    }

    /// Seeded initialization: dense weights uniform in ±1/√fan_in, biases
    /// zero. Draw order is fixed (w1, w2, wp, wq) so identical seeds give
    /// identical parameters.
    pub fn init(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = ParamSet::zeros(cfg);
        let bound1 = 1.0 / (cfg.input_dim as f64).sqrt();
        let bound2 = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for i in cfg.w1() {
            p.data[i] = rng.gen_range(-bound1..bound1);
        }
        for i in cfg.w2() {
            p.data[i] = rng.gen_range(-bound2..bound2);
        }
        for i in cfg.wp() {
            p.data[i] = rng.gen_range(-bound2..bound2);
        }
        for i in cfg.wq() {
            p.data[i] = rng.gen_range(-bound2..bound2);
        }
        p
    }

    pub fn cfg(&self) -> NetConfig {
        self.cfg
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Checksum over the exact parameter bits.
    pub fn checksum(&self) -> u64 {
        crate::checksum::checksum_f64s(&self.data)
    }
}

/// Per-candidate activations cached for the backward pass.
struct Cache {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn encode(p: &ParamSet, x: &[f64]) -> Cache {
    let cfg = p.cfg;
    let d = &p.data;
    let (f, h) = (cfg.input_dim, cfg.hidden_dim);
    debug_assert_eq!(x.len(), f);
    let w1 = &d[cfg.w1()];
    let b1 = &d[cfg.b1()];
    let mut h1 = vec![0.0; h];
    for i in 0..h {
        let mut acc = b1[i];
        let row = &w1[i * f..(i + 1) * f];
        for (w, xv) in row.iter().zip(x) {
            acc += w * xv;
        }
        h1[i] = acc.tanh();
    }
    let w2 = &d[cfg.w2()];
    let b2 = &d[cfg.b2()];
    let mut h2 = vec![0.0; h];
    for i in 0..h {
        let mut acc = b2[i];
        let row = &w2[i * h..(i + 1) * h];
        for (w, hv) in row.iter().zip(&h1) {
            acc += w * hv;
        }
        h2[i] = acc.tanh();
    }
    Cache { h1, h2 }
}

fn head(p: &ParamSet, w: Range<usize>, b: usize, h2: &[f64]) -> f64 {
    p.data[w].iter().zip(h2).map(|(w, h)| w * h).sum::<f64>() + p.data[b]
}

/// Forward pass over a candidate set. Masked candidates receive behavior
/// probability exactly 0.0; Q values are reported for every candidate but
/// consumers must never select masked ones.
///
/// Panics if the candidate set is empty or fully masked (contract violation:
/// the budget mask guarantees at least one feasible candidate).
pub fn forward_heads(
    params: &ParamSet,
    features: &[[f64; N_FEATURES]],
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let (probs, qs, _) = forward_cached(params, features, mask);
    (probs, qs)
}

fn forward_cached(
    params: &ParamSet,
    features: &[[f64; N_FEATURES]],
    mask: &[bool],
) -> (Vec<f64>, Vec<f64>, Vec<Cache>) {
    assert!(!features.is_empty(), "empty candidate set");
    assert_eq!(features.len(), mask.len(), "mask length mismatch");
    assert!(mask.iter().any(|&m| m), "all candidates masked");
    assert_eq!(params.cfg.input_dim, N_FEATURES);
    let c = features.len();
    let mut caches = Vec::with_capacity(c);
    let mut logits = vec![0.0; c];
    let mut qs = vec![0.0; c];
    for (i, row) in features.iter().enumerate() {
        let cache = encode(params, row);
        logits[i] = head(params, params.cfg.wp(), params.cfg.bp(), &cache.h2);
        qs[i] = head(params, params.cfg.wq(), params.cfg.bq(), &cache.h2);
        caches.push(cache);
    }
    let probs = masked_softmax(&logits, mask);
    (probs, qs, caches)
}

/// Softmax over unmasked entries; masked entries are exactly 0.0.
fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if mask[i] {
            probs[i] = (logits[i] - max).exp();
            sum += probs[i];
        }
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs
}

/// Q value of a single candidate row (used for metrics without paying for a
/// full candidate-set forward pass).
pub fn q_at(params: &ParamSet, x: &[f64; N_FEATURES]) -> f64 {
    assert_eq!(params.cfg.input_dim, N_FEATURES);
    let cache = encode(params, x);
    head(params, params.cfg.wq(), params.cfg.bq(), &cache.h2)
}

/// Behavior-constraint filter: admissible ⇔ unmasked and
/// p(a) ≥ tau · max p. The behavior argmax always qualifies, so the result
/// is never empty for tau ∈ [0, 1].
pub fn admissible(probs: &[f64], mask: &[bool], tau: f64) -> Vec<bool> {
    let pmax = probs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let thresh = tau * pmax;
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| m && p >= thresh)
        .collect()
}

/// Backpropagates a gradient at h2 through the encoder for one candidate,
/// accumulating into `grads`.
fn backprop_encoder(params: &ParamSet, x: &[f64], cache: &Cache, dh2: &[f64], grads: &mut [f64]) {
    let cfg = params.cfg;
    let (f, h) = (cfg.input_dim, cfg.hidden_dim);
    let d = &params.data;
    // Through second tanh.
    let mut dz2 = vec![0.0; h];
    for i in 0..h {
        dz2[i] = dh2[i] * (1.0 - cache.h2[i] * cache.h2[i]);
    }
    let (gw2_s, gb2_s) = (cfg.w2().start, cfg.b2().start);
    let w2 = &d[cfg.w2()];
    let mut dh1 = vec![0.0; h];
    for i in 0..h {
        let z = dz2[i];
        if z == 0.0 {
            continue;
        }
        grads[gb2_s + i] += z;
        let grow = &mut grads[gw2_s + i * h..gw2_s + (i + 1) * h];
        for k in 0..h {
            grow[k] += z * cache.h1[k];
        }
        let wrow = &w2[i * h..(i + 1) * h];
        for k in 0..h {
            dh1[k] += wrow[k] * z;
        }
    }
    // Through first tanh.
    let (gw1_s, gb1_s) = (cfg.w1().start, cfg.b1().start);
    for i in 0..h {
        let z = dh1[i] * (1.0 - cache.h1[i] * cache.h1[i]);
        if z == 0.0 {
            continue;
        }
        grads[gb1_s + i] += z;
        let grow = &mut grads[gw1_s + i * f..gw1_s + (i + 1) * f];
        for (g, xv) in grow.iter_mut().zip(x) {
            *g += z * xv;
        }
    }
}

/// Negative log-likelihood of the logged actions under the behavior head:
/// loss = −mean log p(action). Returns (loss, gradient) with gradients from
/// exact reverse-mode accumulation.
pub fn nll_loss_grad(params: &ParamSet, batch: &[&Transition]) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "empty batch");
    let cfg = params.cfg;
    let mut grads = vec![0.0; cfg.n_params()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let (probs, _, caches) = forward_cached(params, &t.state_features, &t.state_mask);
        debug_assert!(t.state_mask[t.action], "logged action is masked");
        loss -= probs[t.action].ln() * scale;
        // d loss / d logit_c = (p_c − 1{c=action}) / B on unmasked candidates.
        let (wp_s, bp) = (cfg.wp().start, cfg.bp());
        let wp = params.data[cfg.wp()].to_vec();
        for (c, cache) in caches.iter().enumerate() {
            if !t.state_mask[c] {
                continue;
            }
            let dlogit = (probs[c] - if c == t.action { 1.0 } else { 0.0 }) * scale;
            if dlogit == 0.0 {
                continue;
            }
            grads[bp] += dlogit;
            let mut dh2 = vec![0.0; cfg.hidden_dim];
            for i in 0..cfg.hidden_dim {
                grads[wp_s + i] += dlogit * cache.h2[i];
                dh2[i] = wp[i] * dlogit;
            }
            backprop_encoder(params, &t.state_features[c], cache, &dh2, &mut grads);
        }
    }
    (loss, grads)
}

/// TD targets y = r + γ·max Q̄ over next-state candidates admissible under
/// the CURRENT parameters' behavior head (relative-tau rule); y = r on done
/// transitions. Targets are constants with respect to the parameters — the
/// TD gradient flows only through Q(s, a).
pub fn td_targets(
    params: &ParamSet,
    target_params: &ParamSet,
    batch: &[&Transition],
    gamma: f64,
    tau: f64,
) -> Vec<f64> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                return t.reward;
            }
            let (probs, _, _) = forward_cached(params, &t.next_features, &t.next_mask);
            let (_, qs, _) = forward_cached(target_params, &t.next_features, &t.next_mask);
            let adm = admissible(&probs, &t.next_mask, tau);
            let best = qs
                .iter()
                .zip(&adm)
                .filter(|(_, &a)| a)
                .map(|(&q, _)| q)
                .fold(f64::NEG_INFINITY, f64::max);
            t.reward + gamma * best
        })
        .collect()
}

/// Squared TD error against fixed targets: loss = mean (y − Q(s,a))²,
/// gradient through Q(s,a) only.
pub fn td_loss_grad_with_targets(
    params: &ParamSet,
    batch: &[&Transition],
    targets: &[f64],
) -> (f64, Vec<f64>) {
    assert_eq!(batch.len(), targets.len());
    assert!(!batch.is_empty(), "empty batch");
    let cfg = params.cfg;
    let mut grads = vec![0.0; cfg.n_params()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let (wq_s, bq) = (cfg.wq().start, cfg.bq());
    let wq = params.data[cfg.wq()].to_vec();
    for (t, &y) in batch.iter().zip(targets) {
        let cache = encode(params, &t.state_features[t.action]);
        let q = head(params, cfg.wq(), cfg.bq(), &cache.h2);
        let err = q - y;
        loss += err * err * scale;
        let dq = 2.0 * err * scale;
        grads[bq] += dq;
        let mut dh2 = vec![0.0; cfg.hidden_dim];
        for i in 0..cfg.hidden_dim {
            grads[wq_s + i] += dq * cache.h2[i];
            dh2[i] = wq[i] * dq;
        }
        backprop_encoder(params, &t.state_features[t.action], &cache, &dh2, &mut grads);
    }
    (loss, grads)
}

/// One-call TD loss: computes targets, then the loss and gradient.
pub fn td_loss_grad(
    params: &ParamSet,
    target_params: &ParamSet,
    batch: &[&Transition],
    gamma: f64,
    tau: f64,
) -> (f64, Vec<f64>) {
    let targets = td_targets(params, target_params, batch, gamma, tau);
    td_loss_grad_with_targets(params, batch, &targets)
}

/// Bias-corrected Adam accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], opt: &mut AdamState) -> Result<(), NnError> {
    assert_eq!(grads.len(), params.len(), "gradient shape mismatch");
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGrad { index });
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for i in 0..grads.len() {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        params.data[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
    }
    Ok(())
}

/// Which loss a gradient check probes.
pub enum LossKind<'a> {
    Nll(&'a [&'a Transition]),
    /// TD with frozen targets: the analytic gradient treats targets as
    /// constants, so the finite-difference probe must hold them fixed too.
    Td {
        target: &'a ParamSet,
        batch: &'a [&'a Transition],
        gamma: f64,
        tau: f64,
    },
}

/// Central finite differences (h = 1e-5) against the analytic gradient over
/// all parameters, or a seeded random subset of `subset` coordinates.
/// Returns the maximum relative error |fd − g| / max(1e-6, |fd| + |g|).
pub fn grad_check(
    params: &ParamSet,
    loss: &LossKind<'_>,
    subset: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    const H: f64 = 1e-5;
    let (_, analytic) = match loss {
        LossKind::Nll(batch) => nll_loss_grad(params, batch),
        LossKind::Td {
            target,
            batch,
            gamma,
            tau,
        } => {
            let targets = td_targets(params, target, batch, *gamma, *tau);
            td_loss_grad_with_targets(params, batch, &targets)
        }
    };
    let eval = |p: &ParamSet| -> f64 {
        match loss {
            LossKind::Nll(batch) => nll_loss_grad(p, batch).0,
            LossKind::Td {
                target,
                batch,
                gamma,
                tau,
            } => {
                // Frozen targets: recompute them from the UNPERTURBED params.
                let targets = td_targets(params, target, batch, *gamma, *tau);
                td_loss_grad_with_targets(p, batch, &targets).0
            }
        }
    };
    let coords: Vec<usize> = match subset {
        Some(k) if k < params.len() => {
            let mut idx: Vec<usize> = (0..params.len()).collect();
            // Partial Fisher-Yates: the first k entries form the sample.
            for i in 0..k {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
        _ => (0..params.len()).collect(),
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &i in &coords {
        let orig = probe.data[i];
        probe.data[i] = orig + H;
        let plus = eval(&probe);
        probe.data[i] = orig - H;
        let minus = eval(&probe);
        probe.data[i] = orig;
        let fd = (plus - minus) / (2.0 * H);
        let rel = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// What a checkpoint holds besides the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    /// Batch-constrained Q policy (Q head selects within the behavior set).
    Bcq,
    /// Behavior clone (behavior head argmax).
    Bc,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OFRP";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained policy with the hyperparameters needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub kind: CheckpointKind,
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
}

impl Checkpoint {
    /// Serialized layout: magic, version u32, input_dim u32, hidden_dim u32,
    /// kind u8, tau/gamma/lr f64, n_params u64, parameters as little-endian
    /// f64, then a u64 checksum of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(45 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.cfg.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.cfg.hidden_dim as u32).to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Bcq => 0,
            CheckpointKind::Bc => 1,
        });
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&self.lr.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut ck = Checksum::new();
        ck.update(&out);
        out.extend_from_slice(&ck.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |msg: &str| NnError::BadCheckpoint(msg.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let mut ck = Checksum::new();
        ck.update(body);
        if ck.finish() != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut cur = body;
        let mut take = |n: usize| -> Result<&[u8], NnError> {
            if cur.len() < n {
                return Err(bad("truncated header"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NnError::BadCheckpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let input_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let hidden_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let kind = match take(1)?[0] {
            0 => CheckpointKind::Bcq,
            1 => CheckpointKind::Bc,
            other => return Err(NnError::BadCheckpoint(format!("unknown kind byte {other}"))),
        };
        let tau = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let gamma = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let lr = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let n_params = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cfg = NetConfig {
            input_dim,
            hidden_dim,
        };
        if n_params != cfg.n_params() {
            return Err(bad("parameter count inconsistent with dimensions"));
        }
        let raw = take(n_params * 8)?;
        if !cur.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Checkpoint {
            params: ParamSet { cfg, data },
            kind,
            tau,
            gamma,
            lr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn small_cfg() -> NetConfig {
        NetConfig {
            input_dim: N_FEATURES,
            hidden_dim: 16,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, c: usize) -> Vec<[f64; N_FEATURES]> {
        (0..c)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    /// Random transition over `c` candidates; the action is always unmasked.
    fn random_transition(rng: &mut ChaCha8Rng, c: usize, done: bool) -> Transition {
        let state_mask: Vec<bool> = (0..c).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
        let open: Vec<usize> = state_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let action = open[rng.gen_range(0..open.len())];
        let next_mask: Vec<bool> = (0..c).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
        Transition {
            state_features: random_features(rng, c),
            state_mask,
            action,
            reward: rng.gen_range(0.0..1.0),
            next_features: random_features(rng, c),
            next_mask,
            done,
        }
    }

    #[test]
    fn layout_sizes_add_up() {
        let cfg = NetConfig::default();
        // 10→64, 64→64, two 64→1 heads.
        assert_eq!(cfg.n_params(), 640 + 64 + 4096 + 64 + 64 + 1 + 64 + 1);
        let p = ParamSet::zeros(cfg);
        assert_eq!(p.len(), cfg.n_params());
    }

    #[test]
    fn init_respects_bounds_and_is_seeded() {
        let cfg = NetConfig::default();
        let a = ParamSet::init(cfg, &mut seed::rng_from(7));
        let b = ParamSet::init(cfg, &mut seed::rng_from(7));
        assert_eq!(a, b);
        let bound1 = 1.0 / (cfg.input_dim as f64).sqrt();
        let bound2 = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for i in cfg.w1() {
            assert!(a.as_slice()[i].abs() <= bound1);
        }
        for i in cfg.w2().chain(cfg.wp()).chain(cfg.wq()) {
            assert!(a.as_slice()[i].abs() <= bound2);
        }
        for i in cfg.b1().chain(cfg.b2()) {
            assert_eq!(a.as_slice()[i], 0.0);
        }
        assert_eq!(a.as_slice()[cfg.bp()], 0.0);
        assert_eq!(a.as_slice()[cfg.bq()], 0.0);
        assert!(a.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_head_gives_exactly_uniform_probs() {
        // Weights random in the encoder, but zero policy head ⇒ equal logits.
        let cfg = small_cfg();
        let mut p = ParamSet::init(cfg, &mut seed::rng_from(1));
        for i in cfg.wp() {
            p.as_mut_slice()[i] = 0.0;
        }
        p.as_mut_slice()[cfg.bp()] = 0.0;
        let mut rng = seed::rng_from(2);
        let feats = random_features(&mut rng, 4);
        let (probs, _) = forward_heads(&p, &feats, &[true; 4]);
        assert_eq!(probs, vec![0.25; 4]);
    }

    #[test]
    fn single_unmasked_candidate_has_probability_one() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(3));
        let mut rng = seed::rng_from(4);
        let feats = random_features(&mut rng, 5);
        let mask = [false, false, true, false, false];
        let (probs, _) = forward_heads(&p, &feats, &mask);
        assert_eq!(probs[2], 1.0);
        for (i, &pr) in probs.iter().enumerate() {
            if i != 2 {
                assert_eq!(pr, 0.0, "masked probability must be exactly zero");
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(5));
        let mut rng = seed::rng_from(6);
        let feats = random_features(&mut rng, 6);
        let mask = [true, true, false, true, true, true];
        let (probs, qs) = forward_heads(&p, &feats, &mask);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // Independent naive recomputation, scalar loops only.
        let d = p.as_slice();
        let (f, h) = (cfg.input_dim, cfg.hidden_dim);
        let mut logits = Vec::new();
        let mut qs2 = Vec::new();
        for row in &feats {
            let mut h1 = vec![0.0; h];
            for i in 0..h {
                let mut acc = d[cfg.b1()][i];
                for j in 0..f {
                    acc += d[cfg.w1()][i * f + j] * row[j];
                }
                h1[i] = acc.tanh();
            }
            let mut h2 = vec![0.0; h];
            for i in 0..h {
                let mut acc = d[cfg.b2()][i];
                for j in 0..h {
                    acc += d[cfg.w2()][i * h + j] * h1[j];
                }
                h2[i] = acc.tanh();
            }
            let mut logit = d[cfg.bp()];
            let mut q = d[cfg.bq()];
            for i in 0..h {
                logit += d[cfg.wp()][i] * h2[i];
                q += d[cfg.wq()][i] * h2[i];
            }
            logits.push(logit);
            qs2.push(q);
        }
        let max = logits
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits
            .iter()
            .zip(&mask)
            .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
            .collect();
        let sum: f64 = exps.iter().sum();
        for i in 0..feats.len() {
            assert!((probs[i] - exps[i] / sum).abs() < 1e-14);
            assert!((qs[i] - qs2[i]).abs() < 1e-12);
            assert_eq!(q_at(&p, &feats[i]).to_bits(), qs[i].to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "all candidates masked")]
    fn all_masked_input_is_a_contract_violation() {
        let cfg = small_cfg();
        let p = ParamSet::zeros(cfg);
        let feats = random_features(&mut seed::rng_from(1), 3);
        forward_heads(&p, &feats, &[false, false, false]);
    }

    #[test]
    fn nll_on_deterministic_behavior_is_zero_with_zero_grad() {
        // Single unmasked candidate equal to the action ⇒ p = 1 exactly.
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(8));
        let mut rng = seed::rng_from(9);
        let mut t = random_transition(&mut rng, 4, true);
        t.state_mask = vec![false, true, false, false];
        t.action = 1;
        let (loss, grads) = nll_loss_grad(&p, &[&t]);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nll_uniform_probs_is_ln_4() {
        let cfg = small_cfg();
        let mut p = ParamSet::init(cfg, &mut seed::rng_from(10));
        for i in cfg.wp() {
            p.as_mut_slice()[i] = 0.0;
        }
        p.as_mut_slice()[cfg.bp()] = 0.0;
        let mut rng = seed::rng_from(11);
        let mut t = random_transition(&mut rng, 4, false);
        t.state_mask = vec![true; 4];
        let (loss, _) = nll_loss_grad(&p, &[&t]);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(12));
        let mut rng = seed::rng_from(13);
        let batch: Vec<Transition> =
            (0..6).map(|i| random_transition(&mut rng, 5, i % 3 == 0)).collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let err = grad_check(&p, &LossKind::Nll(&refs), None, &mut rng);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn td_done_transitions_have_closed_form_loss() {
        let cfg = small_cfg();
        let zero = ParamSet::zeros(cfg);
        let mut rng = seed::rng_from(14);
        // Zero params ⇒ Q ≡ 0. Done transition with r = 1 ⇒ squared error 1.
        let mut t = random_transition(&mut rng, 4, true);
        t.reward = 1.0;
        let (loss, _) = td_loss_grad(&zero, &zero, &[&t], 0.99, 0.3);
        assert_eq!(loss, 1.0);

        // Done transition whose reward equals Q(s,a) ⇒ zero loss.
        let p = ParamSet::init(cfg, &mut seed::rng_from(15));
        let mut t2 = random_transition(&mut rng, 4, true);
        let cache = encode(&p, &t2.state_features[t2.action]);
        t2.reward = head(&p, cfg.wq(), cfg.bq(), &cache.h2);
        let (loss2, _) = td_loss_grad(&p, &p, &[&t2], 0.99, 0.3);
        assert_eq!(loss2, 0.0);
    }

    #[test]
    fn td_loss_matches_hand_evaluation() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(16));
        let targ = ParamSet::init(cfg, &mut seed::rng_from(17));
        let mut rng = seed::rng_from(18);
        let batch: Vec<Transition> = vec![
            random_transition(&mut rng, 4, false),
            random_transition(&mut rng, 5, true),
            random_transition(&mut rng, 3, false),
        ];
        let refs: Vec<&Transition> = batch.iter().collect();
        let (gamma, tau) = (0.99, 0.3);
        let (loss, _) = td_loss_grad(&p, &targ, &refs, gamma, tau);

        // Hand evaluation through the public forward pass only.
        let mut expect = 0.0;
        for t in &batch {
            let (_, qs) = forward_heads(&p, &t.state_features, &t.state_mask);
            let y = if t.done {
                t.reward
            } else {
                let (probs, _) = forward_heads(&p, &t.next_features, &t.next_mask);
                let (_, qn) = forward_heads(&targ, &t.next_features, &t.next_mask);
                let pmax = probs
                    .iter()
                    .zip(&t.next_mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let best = (0..probs.len())
                    .filter(|&c| t.next_mask[c] && probs[c] >= tau * pmax)
                    .map(|c| qn[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            };
            expect += (y - qs[t.action]).powi(2) / batch.len() as f64;
        }
        assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
    }

    #[test]
    fn td_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(19));
        let targ = ParamSet::init(cfg, &mut seed::rng_from(20));
        let mut rng = seed::rng_from(21);
        let batch: Vec<Transition> =
            (0..5).map(|i| random_transition(&mut rng, 4, i == 2)).collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let loss = LossKind::Td {
            target: &targ,
            batch: &refs,
            gamma: 0.99,
            tau: 0.3,
        };
        let err = grad_check(&p, &loss, None, &mut rng);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_exact_on_linear_model() {
        // Zero encoder weights make h2 = tanh(b2) = 0, so Q = bq: the TD loss
        // is a pure quadratic in bq and central differences are near-exact.
        let cfg = small_cfg();
        let p = ParamSet::zeros(cfg);
        let mut rng = seed::rng_from(22);
        let mut t = random_transition(&mut rng, 3, true);
        t.reward = 0.25;
        let refs = [&t];
        let targets = vec![0.25];
        let (_, g) = td_loss_grad_with_targets(&p, &refs, &targets);
        // d/d_bq (bq − 0.25)² = 2(bq − 0.25) = −0.5 at bq = 0.
        assert!((g[cfg.bq()] + 0.5).abs() < 1e-12);
        let loss = LossKind::Td {
            target: &p,
            batch: &refs,
            gamma: 0.99,
            tau: 0.3,
        };
        let err = grad_check(&p, &loss, None, &mut rng);
        assert!(err < 1e-9, "linear-model error {err}");
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let cfg = small_cfg();
        let mut p = ParamSet::zeros(cfg);
        let mut opt = AdamState::new(p.len(), 1e-3);
        let mut grads = vec![0.0; p.len()];
        grads[cfg.bq()] = 1.0;
        adam_step(&mut p, &grads, &mut opt).unwrap();
        let delta = p.as_slice()[cfg.bq()];
        assert!((delta + 1e-3).abs() < 1e-9, "first step {delta}");
        // Zero-gradient coordinates stay put.
        assert!(p.as_slice().iter().enumerate().all(|(i, &v)| i == cfg.bq() || v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = small_cfg();
        let mut p = ParamSet::init(cfg, &mut seed::rng_from(23));
        let before = p.clone();
        let mut opt = AdamState::new(p.len(), 1e-3);
        let grads = vec![0.0; p.len()];
        adam_step(&mut p, &grads, &mut opt).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        // Minimize (bq − 3)² by gradient descent on the single coordinate.
        let cfg = small_cfg();
        let mut p = ParamSet::zeros(cfg);
        let mut opt = AdamState::new(p.len(), 0.5);
        let mut prev = f64::INFINITY;
        for _ in 0..5 {
            let bq = p.as_slice()[cfg.bq()];
            let obj = (bq - 3.0) * (bq - 3.0);
            assert!(obj < prev, "objective must decrease monotonically");
            prev = obj;
            let mut grads = vec![0.0; p.len()];
            grads[cfg.bq()] = 2.0 * (bq - 3.0);
            adam_step(&mut p, &grads, &mut opt).unwrap();
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let cfg = small_cfg();
        let mut p = ParamSet::zeros(cfg);
        let mut opt = AdamState::new(p.len(), 1e-3);
        let mut grads = vec![0.0; p.len()];
        grads[3] = f64::NAN;
        assert!(matches!(
            adam_step(&mut p, &grads, &mut opt),
            Err(NnError::NonFiniteGrad { index: 3 })
        ));
    }

    #[test]
    fn admissible_set_examples() {
        // probs [0.5, 0.3, 0.2], tau 0.5 ⇒ threshold 0.25 ⇒ {0, 1}.
        let adm = admissible(&[0.5, 0.3, 0.2], &[true; 3], 0.5);
        assert_eq!(adm, vec![true, true, false]);
        // tau 1 ⇒ only the argmax; tau 0 ⇒ everything unmasked.
        assert_eq!(admissible(&[0.5, 0.3, 0.2], &[true; 3], 1.0), vec![true, false, false]);
        assert_eq!(admissible(&[0.5, 0.3, 0.2], &[true; 3], 0.0), vec![true, true, true]);
        // Masked entries never qualify even with huge probability.
        assert_eq!(admissible(&[0.9, 0.1], &[false, true], 0.0), vec![false, true]);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = NetConfig::default();
        let params = ParamSet::init(cfg, &mut seed::rng_from(24));
        let ck = Checkpoint {
            params,
            kind: CheckpointKind::Bcq,
            tau: 0.3,
            gamma: 0.99,
            lr: 1e-3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, loaded);
        for (a, b) in ck.params.as_slice().iter().zip(loaded.params.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_detects_corruption_and_bad_version() {
        let cfg = small_cfg();
        let ck = Checkpoint {
            params: ParamSet::init(cfg, &mut seed::rng_from(25)),
            kind: CheckpointKind::Bc,
            tau: 1.0,
            gamma: 0.99,
            lr: 1e-3,
        };
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(NnError::BadCheckpoint(msg)) if msg.contains("checksum")
        ));

        // Bump the version and re-sign: must be rejected as unsupported.
        let mut vbytes = ck.to_bytes();
        vbytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let body_len = vbytes.len() - 8;
        let mut ckm = Checksum::new();
        ckm.update(&vbytes[..body_len]);
        let sig = ckm.finish().to_le_bytes();
        vbytes[body_len..].copy_from_slice(&sig);
        assert!(matches!(
            Checkpoint::from_bytes(&vbytes),
            Err(NnError::BadCheckpoint(msg)) if msg.contains("version")
        ));
    }

    #[test]
    fn forward_is_pure_and_deterministic() {
        let cfg = small_cfg();
        let p = ParamSet::init(cfg, &mut seed::rng_from(26));
        let feats = random_features(&mut seed::rng_from(27), 7);
        let mask = [true, false, true, true, true, false, true];
        let (p1, q1) = forward_heads(&p, &feats, &mask);
        let (p2, q2) = forward_heads(&p, &feats, &mask);
        for (a, b) in p1.iter().zip(&p2).chain(q1.iter().zip(&q2)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
