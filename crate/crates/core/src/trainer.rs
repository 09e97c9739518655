//! Head-only training: binary cross-entropy, Adam, and a reduce-on-plateau
//! learning-rate schedule driven by validation loss.
//!
//! The base is frozen and its BN layers always use moving statistics, so the
//! pooled base features of every slice are computed once and reused across
//! epochs. Only the head runs per step.

use std::fmt::Write as _;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diagnosis::Label;
use crate::ingest::{self, DatasetManifest, IngestError};
use crate::metrics::{self, ConfusionCounts};
use crate::tensor::head::{head_backward, HeadParams};
use crate::tensor::{dropout_mask, TensorError};
use crate::xception::{ModelError, ModelGraph, Section};

/// Lower/upper clip applied to probabilities before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("volume `{0}` has no label; training needs labeled data")]
    Unlabeled(String),
    #[error("base parameter `{0}` is trainable; freeze the base first")]
    NotFrozen(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_epsilon: f32,
    /// Momentum of the head BN moving-statistics update.
    pub bn_momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 13,
            plateau_patience: 2,
            plateau_factor: 0.1,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            bn_momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0) || !(self.min_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.min_lr > self.learning_rate {
            return bad(format!("min_lr {} exceeds learning rate {}", self.min_lr, self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return bad("batch size, epochs and patience must be positive".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", self.plateau_factor));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("bn_momentum", self.bn_momentum)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over the batch and its gradient with respect to
/// each probability. Probabilities are clipped to `[1e-7, 1 − 1e-7]` first;
/// the gradient is zero where clipping is active.
pub fn bce_loss<F: Float>(p: &[F], y: &[F]) -> Result<(F, Vec<F>)> {
    if p.len() != y.len() {
        return Err(TrainError::LengthMismatch {
            what: "bce_loss",
            left: p.len(),
            right: y.len(),
        });
    }
    if p.is_empty() {
        return Err(TrainError::EmptySet("bce batch"));
    }
    let lo = F::from(PROB_CLIP).unwrap();
    let hi = F::one() - lo;
    let n = F::from(p.len()).unwrap();
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pi, &yi) in p.iter().zip(y) {
        // NaN must survive clipping so the caller can see it.
        let q = if pi.is_nan() { pi } else { pi.max(lo).min(hi) };
        loss = loss - (yi * q.ln() + (F::one() - yi) * (F::one() - q).ln());
        let g = if pi < lo || pi > hi {
            F::zero()
        } else {
            (-yi / q + (F::one() - yi) / (F::one() - q)) / n
        };
        grad.push(g);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over a list of parameter tensors.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::LengthMismatch {
            what: "adam_step tensor count",
            left: params.len(),
            right: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(TrainError::LengthMismatch {
                what: "adam_step tensor size",
                left: p.len(),
                right: g.len(),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1 as f64, config.beta2 as f64);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1f, b2f) = (config.beta1, config.beta2);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1f * m[j] + (1.0 - b1f) * g[j];
            v[j] = b2f * v[j] + (1.0 - b2f) * g[j] * g[j];
            let m_hat = m[j] as f64 / c1;
            let v_hat = v[j] as f64 / c2;
            p[j] -= (lr * m_hat / (v_hat.sqrt() + config.adam_epsilon as f64)) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
/// Rates are kept in f64 so repeated reductions land on the decimal
/// trajectory (0.001 → 0.0001 → …) without f32 drift.
pub struct PlateauState {
    pub best: f64,
    pub wait: usize,
    pub lr: f64,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self {
            best: f64::INFINITY,
            wait: 0,
            lr,
        }
    }
}

/// Epoch-end schedule update: a strict improvement resets the wait counter;
/// `patience` consecutive non-improving epochs multiply the rate by the
/// plateau factor (floored at `min_lr`) and reset the counter.
pub fn plateau_update(state: PlateauState, val_loss: f64, config: &TrainConfig) -> PlateauState {
    let mut s = state;
    if val_loss < s.best {
        s.best = val_loss;
        s.wait = 0;
    } else {
        s.wait += 1;
        if s.wait >= config.plateau_patience {
            s.lr = (s.lr * config.plateau_factor).max(config.min_lr);
            s.wait = 0;
        }
    }
    s
}

/// Pooled base features and binary targets (1 = Non-COVID).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub targets: Vec<f32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Column-wise mean over all epochs (`epoch` holds the epoch count).
    pub fn mean(&self) -> Option<EpochRecord> {
        let n = self.epochs.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&EpochRecord) -> f64| self.epochs.iter().map(f).sum::<f64>() / n as f64;
        Some(EpochRecord {
            epoch: n,
            train_loss: avg(|r| r.train_loss),
            val_loss: avg(|r| r.val_loss),
            train_acc: avg(|r| r.train_acc),
            val_acc: avg(|r| r.val_acc),
            val_precision: avg(|r| r.val_precision),
            val_recall: avg(|r| r.val_recall),
            lr: avg(|r| r.lr),
        })
    }

    /// One row per epoch, then a `mean` row averaging every column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,train_acc,val_acc,val_precision,val_recall,lr\n");
        let row = |s: &mut String, label: String, r: &EpochRecord| {
            let _ = writeln!(
                s,
                "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
                r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.val_precision, r.val_recall, r.lr
            );
        };
        for r in &self.epochs {
            row(&mut s, r.epoch.to_string(), r);
        }
        if let Some(m) = self.mean() {
            row(&mut s, "mean".into(), &m);
        }
        s
    }
}

fn head_slices(h: &mut HeadParams<f32>) -> [&mut [f32]; 6] {
    [
        &mut h.dense1_kernel,
        &mut h.dense1_bias,
        &mut h.bn_gamma,
        &mut h.bn_beta,
        &mut h.dense2_kernel,
        &mut h.dense2_bias,
    ]
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(batch as u64)
}

/// Slice-level confusion at the fixed 0.5 threshold (COVID positive).
fn slice_confusion(probs: &[f32], targets: &[f32]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in probs.iter().zip(targets) {
        let pred = if p > 0.5 { Label::NonCovid } else { Label::Covid };
        let truth = if t > 0.5 { Label::NonCovid } else { Label::Covid };
        c.record(pred, truth);
    }
    c
}

/// Trains the head in place on precomputed features.
pub fn train_head_on_features(
    head: &mut HeadParams<f32>,
    dropout_rate: f32,
    train: &FeatureSet,
    val: &FeatureSet,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    head.check()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    for set in [train, val] {
        if set.dim != head.in_features || set.features.len() != set.len() * set.dim {
            return Err(TrainError::LengthMismatch {
                what: "feature dimension",
                left: set.dim,
                right: head.in_features,
            });
        }
    }

    let sizes: Vec<usize> = head_slices(head).iter().map(|s| s.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut plateau = PlateauState::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let hidden = head.hidden;
    let momentum = config.bn_momentum;

    for epoch in 1..=config.epochs {
        let lr = plateau.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(config.seed, epoch, usize::MAX));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut train_conf = ConfusionCounts::default();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let n = idx.len();
            let mut x = Vec::with_capacity(n * train.dim);
            let mut y = Vec::with_capacity(n);
            for &i in idx {
                x.extend_from_slice(train.row(i));
                y.push(train.targets[i]);
            }
            let mask = dropout_mask(n * hidden, dropout_rate, batch_seed(config.seed, epoch, b))?;
            let (probs, cache) = head.forward_train(&x, n, &mask)?;
            let (loss, dloss) = bce_loss(&probs, &y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss as f64 * n as f64;
            let tc = slice_confusion(&probs, &y);
            train_conf.tp += tc.tp;
            train_conf.fp += tc.fp;
            train_conf.tn += tc.tn;
            train_conf.fn_ += tc.fn_;

            let grads = head_backward(&cache, &dloss)?;
            let g: [&[f32]; 6] = [
                &grads.dense1_kernel,
                &grads.dense1_bias,
                &grads.bn_gamma,
                &grads.bn_beta,
                &grads.dense2_kernel,
                &grads.dense2_bias,
            ];
            adam_step(&mut head_slices(head), &g, &mut adam, lr, config)?;

            let unbias = if n > 1 { n as f32 / (n as f32 - 1.0) } else { 1.0 };
            for j in 0..hidden {
                head.bn_moving_mean[j] = momentum * head.bn_moving_mean[j] + (1.0 - momentum) * cache.batch_mean[j];
                head.bn_moving_variance[j] =
                    momentum * head.bn_moving_variance[j] + (1.0 - momentum) * cache.batch_variance[j] * unbias;
            }
        }

        let val_probs = head.forward_infer(&val.features, val.len())?;
        let (val_loss, _) = bce_loss(&val_probs, &val.targets)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
            });
        }
        let vc = slice_confusion(&val_probs, &val.targets);
        let (covid, _) = metrics::per_class_prf(&vc);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: val_loss as f64,
            train_acc: metrics::accuracy(&train_conf).unwrap_or(0.0),
            val_acc: metrics::accuracy(&vc).unwrap_or(0.0),
            val_precision: covid.precision,
            val_recall: covid.recall,
            lr,
        });
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} lr {lr:e}",
            loss_sum / train.len() as f64,
            val_loss
        );
        plateau = plateau_update(plateau, val_loss as f64, config);
    }
    Ok(history)
}

/// Runs the frozen base over every slice of a labeled manifest.
pub fn extract_features(model: &ModelGraph, manifest: &DatasetManifest, batch_size: usize) -> Result<FeatureSet> {
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for v in &manifest.volumes {
        let label = v.label.ok_or_else(|| TrainError::Unlabeled(v.volume_id.clone()))?;
        targets.extend(std::iter::repeat_n(label.target(), v.slice_paths.len()));
    }
    for batch in ingest::batch_iter(&manifest.volumes, batch_size, model.input_side())? {
        let batch = batch?;
        features.extend_from_slice(model.pooled_features(&batch.tensor)?.data());
    }
    Ok(FeatureSet {
        dim: 2048,
        features,
        targets,
    })
}

/// Trains the head of a base-frozen model on labeled training and validation
/// manifests. Base tensors are never written.
pub fn train_head(
    mut model: ModelGraph,
    train: &DatasetManifest,
    val: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainHistory)> {
    config.validate()?;
    if let Some(p) = model.params().iter().find(|p| p.section == Section::Base && p.trainable) {
        return Err(TrainError::NotFrozen(p.name.clone()));
    }
    model.check_weights()?;
    for m in [train, val] {
        if let Some(v) = m.volumes.iter().find(|v| v.label.is_none()) {
            return Err(TrainError::Unlabeled(v.volume_id.clone()));
        }
    }
    let train_set = extract_features(&model, train, config.batch_size)?;
    let val_set = extract_features(&model, val, config.batch_size)?;
    let mut head = model.head_params();
    let history = train_head_on_features(&mut head, model.head_spec().dropout_rate, &train_set, &val_set, config)?;
    model.set_head_params(&head)?;
    Ok((model, history))
}
