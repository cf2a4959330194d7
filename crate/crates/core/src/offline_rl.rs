//! Offline trainer: behavior-policy pretraining by negative log-likelihood,
//! batch-constrained action selection, and TD learning against a delayed
//! target network. Training touches only the transition dataset — it never
//! runs an environment.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Transition, N_FEATURES};
use crate::nn::{
    self, adam_step, admissible, forward_heads, AdamState, NetConfig, NnError, ParamSet,
};
use crate::seed;

/// Seed stream for parameter initialization.
const INIT_STREAM: u64 = 0x696e_6974; // "init"
/// Seed stream for behavior-pretraining shuffles.
const BC_STREAM: u64 = 0x6263; // "bc"
/// Seed stream for TD-phase shuffles.
const TD_STREAM: u64 = 0x7464; // "td"

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("non-finite TD loss at gradient step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Gradient steps between target-network syncs.
    pub target_update_every: usize,
    /// Behavior-constraint threshold in [0, 1]: 1 = pure imitation,
    /// 0 = unconstrained greedy.
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    /// TD-phase passes over the shuffled dataset.
    pub epochs: usize,
    pub bc_pretrain_epochs: usize,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            target_update_every: 100,
            tau: 0.3,
            gamma: 0.99,
            lr: 1e-3,
            epochs: 1,
            bc_pretrain_epochs: 1,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// gamma = 0 is allowed (it reduces TD to one-step reward regression,
    /// a useful diagnostic), so the accepted range is [0, 1].
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrainError::BadConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::BadConfig(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.target_update_every < 1 {
            return Err(TrainError::BadConfig(
                "target_update_every must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics-log row per gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub td_loss: f64,
    /// Mean Q(s, a) over the minibatch under the current parameters.
    pub mean_q: f64,
    /// True on steps where the target network was synced to the main one.
    pub sync_flag: bool,
}

/// Behavior-pretraining result: parameters plus the per-step NLL trajectory.
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamSet,
    pub losses: Vec<f64>,
    /// Gradient steps per epoch (losses.len() = steps_per_epoch × epochs).
    pub steps_per_epoch: usize,
}

/// Full training result.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Final parameters after TD training (Q head + behavior head).
    pub params: ParamSet,
    /// Snapshot taken right after behavior pretraining — the imitation
    /// baseline ("behavior clone").
    pub behavior: ParamSet,
    /// Pretraining NLL trajectory.
    pub bc_losses: Vec<f64>,
    /// One row per TD gradient step.
    pub metrics: Vec<MetricsRow>,
}

/// Deterministic shuffled minibatch index plan: one shuffled pass per epoch,
/// chunked by batch_size with the final partial chunk included.
fn shuffled_batches(
    n: usize,
    batch_size: usize,
    epochs: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut batches = Vec::new();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

/// Minimize −mean log p(action) over the dataset for bc_pretrain_epochs
/// shuffled passes. Deterministic given cfg.seed.
pub fn pretrain_behavior(
    dataset: &[Transition],
    cfg: &TrainConfig,
) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = ParamSet::init(cfg.net, &mut seed::rng(cfg.seed, INIT_STREAM, 0));
    let mut opt = AdamState::new(params.len(), cfg.lr);
    let mut rng = seed::rng(cfg.seed, BC_STREAM, 0);
    let batches = shuffled_batches(dataset.len(), cfg.batch_size, cfg.bc_pretrain_epochs, &mut rng);
    let mut losses = Vec::with_capacity(batches.len());
    for batch in &batches {
        let refs: Vec<&Transition> = batch.iter().map(|&i| &dataset[i]).collect();
        let (loss, grads) = nn::nll_loss_grad(&params, &refs);
        adam_step(&mut params, &grads, &mut opt)?;
        losses.push(loss);
    }
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    Ok(PretrainOutput {
        params,
        losses,
        steps_per_epoch,
    })
}

/// Constrained greedy selection over precomputed heads: admissible set
/// A = {unmasked a : p(a) ≥ tau · max p}, argmax Q over A, ties broken
/// toward the lowest candidate index.
pub fn constrained_argmax(probs: &[f64], qs: &[f64], mask: &[bool], tau: f64) -> usize {
    let adm = admissible(probs, mask, tau);
    let mut best: Option<usize> = None;
    for c in 0..qs.len() {
        if !adm[c] {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) if qs[c] > qs[b] => best = Some(c),
            _ => {}
        }
    }
    best.expect("admissible set is non-empty: the behavior argmax always qualifies")
}

/// Batch-constrained action: restricts the Q-argmax to candidates the
/// behavior head assigns at least tau times the maximum probability.
pub fn bcq_select_action(
    params: &ParamSet,
    features: &[[f64; N_FEATURES]],
    mask: &[bool],
    tau: f64,
) -> usize {
    let (probs, qs) = forward_heads(params, features, mask);
    constrained_argmax(&probs, &qs, mask, tau)
}

/// Imitation baseline: argmax of the behavior head over unmasked candidates
/// (equivalent to bcq_select_action at tau = 1 with Q ignored).
pub fn bc_select_action(params: &ParamSet, features: &[[f64; N_FEATURES]], mask: &[bool]) -> usize {
    let (probs, _) = forward_heads(params, features, mask);
    let mut best = None;
    for c in 0..probs.len() {
        if !mask[c] {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) if probs[c] > probs[b] => best = Some(c),
            _ => {}
        }
    }
    best.expect("at least one unmasked candidate")
}

/// Behavior pretraining followed by TD training with a delayed target
/// network. The pretraining phase fits the shared encoder and the behavior
/// head; the TD phase then trains the Q head on top of that fixed
/// representation (see the in-loop comment for why the encoder is not
/// revisited). Single-threaded and bitwise deterministic given cfg.seed.
pub fn train_offline(dataset: &[Transition], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_offline_with(dataset, cfg, |_, _, _| {})
}

/// As [`train_offline`], invoking `observer(row, main, target)` after every
/// gradient step (post-update, post-sync). Used by tests that verify the
/// target-network contract without widening the trainer's API.
pub fn train_offline_with<F>(
    dataset: &[Transition],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutput, TrainError>
where
    F: FnMut(&MetricsRow, &ParamSet, &ParamSet),
{
    let pre = pretrain_behavior(dataset, cfg)?;
    let behavior = pre.params.clone();
    let mut params = pre.params;
    let mut target = params.clone();
    let mut opt = AdamState::new(params.len(), cfg.lr);
    let mut rng = seed::rng(cfg.seed, TD_STREAM, 0);
    let batches = shuffled_batches(dataset.len(), cfg.batch_size, cfg.epochs, &mut rng);
    let mut metrics = Vec::with_capacity(batches.len());
    let mut step: u64 = 0;
    let q_span = params.cfg().q_head_span();
    for batch in &batches {
        let refs: Vec<&Transition> = batch.iter().map(|&i| &dataset[i]).collect();
        let targets = nn::td_targets(&params, &target, &refs, cfg.gamma, cfg.tau);
        let (loss, mut grads) = nn::td_loss_grad_with_targets(&params, &refs, &targets);
        step += 1;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        // TD updates touch only the Q head. The shared encoder and the
        // behavior head stay exactly as pretraining left them: admissibility
        // (for both TD targets and the final policy) is read from these same
        // parameters, and letting value gradients rewrite the shared encoder
        // destroys the pretrained behavior model — and with it the batch
        // constraint — long before the Q estimates converge.
        grads[..q_span.start].fill(0.0);
        adam_step(&mut params, &grads, &mut opt)?;
        let mean_q = refs
            .iter()
            .map(|t| nn::q_at(&params, &t.state_features[t.action]))
            .sum::<f64>()
            / refs.len() as f64;
        let sync_flag = step % cfg.target_update_every as u64 == 0;
        if sync_flag {
            target = params.clone();
        }
        let row = MetricsRow {
            step,
            td_loss: loss,
            mean_q,
            sync_flag,
        };
        observer(&row, &params, &target);
        metrics.push(row);
    }
    Ok(TrainOutput {
        params,
        behavior,
        bc_losses: pre.losses,
        metrics,
    })
}
