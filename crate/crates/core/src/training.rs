//! The masked-autoencoder training loop and a plain supervised loop for the
//! task-specific baselines.
//!
//! One MAE iteration: draw a fresh mask for the observation, impute the masked
//! features with their training means, predict the full vector, score it with
//! the masked-weighted loss and backpropagate. Gradients are averaged over
//! each mini-batch.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::dataset::{FeatureMeans, LayerPartition, LayeredDataset, Split};
use crate::error::{config_err, Error, Result};
use crate::masking::{apply_mask_in_place, missing_mask, Mask, MaskPolicy};
use crate::nnet::{step, Activation, Gradients, MlpModel, OptimKind, OptimState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossBase {
    L1,
    L2,
}

impl LossBase {
    #[inline]
    pub fn value(self, pred: f64, truth: f64) -> f64 {
        let d = pred - truth;
        match self {
            LossBase::L1 => libm::fabs(d),
            LossBase::L2 => d * d,
        }
    }

    #[inline]
    pub fn derivative(self, pred: f64, truth: f64) -> f64 {
        let d = pred - truth;
        match self {
            LossBase::L1 => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossBase::L2 => 2.0 * d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossBase::L1 => "l1",
            LossBase::L2 => "l2",
        }
    }
}

/// Weighted reconstruction loss. Masked features count with
/// `masked_weight`, visible ones with `unmasked_weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub base: LossBase,
    pub masked_weight: f64,
    pub unmasked_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { base: LossBase::L1, masked_weight: 1.0, unmasked_weight: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.masked_weight >= 0.0 && self.unmasked_weight >= 0.0)
            || !(self.masked_weight + self.unmasked_weight > 0.0)
        {
            return Err(config_err!(
                "loss weights ({}, {}) must be non-negative with a positive sum",
                self.masked_weight,
                self.unmasked_weight
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLoss {
    /// `(w_m·Σ_{j∈M} ℓⱼ + w_u·Σ_{j∉M} ℓⱼ) / n`
    pub total: f64,
    /// Weighted masked part of `total`.
    pub masked: f64,
    /// Weighted unmasked part of `total`.
    pub unmasked: f64,
    /// Unweighted `ℓⱼ`; NaN where the truth is missing.
    pub per_feature: Vec<f64>,
}

/// Loss of prediction `p` against truth `x` under mask `mask`. Features whose
/// truth is NaN are left out of both sums.
pub fn masked_loss(x: &[f64], p: &[f64], mask: &Mask, cfg: &LossConfig) -> MaskedLoss {
    let n = x.len();
    let flags = mask.to_flags(n);
    let mut masked = 0.0;
    let mut unmasked = 0.0;
    let per_feature: Vec<f64> = x
        .iter()
        .zip(p)
        .zip(&flags)
        .map(|((&xi, &pi), &m)| {
            if xi.is_nan() {
                return f64::NAN;
            }
            let l = cfg.base.value(pi, xi);
            if m {
                masked += l;
            } else {
                unmasked += l;
            }
            l
        })
        .collect();
    let masked = cfg.masked_weight * masked / n as f64;
    let unmasked = cfg.unmasked_weight * unmasked / n as f64;
    MaskedLoss { total: masked + unmasked, masked, unmasked, per_feature }
}

/// Gradient of [`masked_loss`]'s total with respect to `p`.
pub fn masked_loss_gradient(x: &[f64], p: &[f64], flags: &[bool], cfg: &LossConfig) -> Vec<f64> {
    let n = x.len() as f64;
    x.iter()
        .zip(p)
        .zip(flags)
        .map(|((&xi, &pi), &m)| {
            if xi.is_nan() {
                0.0
            } else {
                let w = if m { cfg.masked_weight } else { cfg.unmasked_weight };
                w * cfg.base.derivative(pi, xi) / n
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub kind: OptimKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 0.05, kind: OptimKind::Momentum { beta: 0.9 } }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Result<OptimState> {
        OptimState::new(self.learning_rate, self.kind)
    }
}

/// Hidden-layer layout of the autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Hidden widths; `None` means `[4n, 4n]`.
    pub hidden: Option<Vec<usize>>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { hidden: None, activation: Activation::Relu }
    }
}

impl Architecture {
    pub fn dims(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        let mut dims = vec![n_in];
        match &self.hidden {
            Some(h) => dims.extend_from_slice(h),
            None => dims.extend_from_slice(&[4 * n_in, 4 * n_in]),
        }
        dims.push(n_out);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub policy: MaskPolicy,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub architecture: Architecture,
    pub seed: u64,
    /// Keep a copy of the model after every `n`-th epoch.
    pub snapshot_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(policy: MaskPolicy, seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            policy,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            architecture: Architecture::default(),
            seed,
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if self.snapshot_every == Some(0) {
            return Err(config_err!("snapshot_every must be >= 1"));
        }
        self.loss.validate()?;
        self.optimizer.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Weighted mean of the per-observation total loss.
    pub mean_loss: f64,
    pub masked_loss: f64,
    pub unmasked_loss: f64,
    /// Mean total loss per row group (e.g. observed vs pseudo-labeled rows).
    pub group_loss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub log: Vec<EpochLog>,
    /// `(epoch, model)` pairs when snapshots were requested.
    pub snapshots: Vec<(usize, MlpModel)>,
}

/// Training rows with optional per-row weights and group tags.
#[derive(Debug, Clone, Default)]
pub struct TrainSet<'a> {
    pub rows: Vec<&'a [f64]>,
    pub weights: Option<Vec<f64>>,
    pub groups: Option<Vec<usize>>,
}

impl<'a> TrainSet<'a> {
    pub fn new(rows: Vec<&'a [f64]>) -> Self {
        TrainSet { rows, weights: None, groups: None }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    fn group(&self, i: usize) -> usize {
        self.groups.as_ref().map_or(0, |g| g[i])
    }

    fn n_groups(&self) -> usize {
        self.groups.as_ref().and_then(|g| g.iter().max().copied()).map_or(1, |m| m + 1)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.rows.is_empty() {
            return Err(config_err!("training split is empty"));
        }
        if let Some(r) = self.rows.iter().position(|r| r.len() != n) {
            return Err(Error::Data(alloc::format!("training row {r} has the wrong width")));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.rows.len() || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(config_err!("row weights must be finite, non-negative, one per row"));
            }
        }
        if self.groups.as_ref().is_some_and(|g| g.len() != self.rows.len()) {
            return Err(config_err!("one group tag per row required"));
        }
        Ok(())
    }
}

/// Trains a fresh autoencoder on the training split of `dataset`.
pub fn train(dataset: &LayeredDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    let means = dataset.compute_feature_means()?;
    let set = TrainSet::new(train_idx.iter().map(|&i| dataset.row(i)).collect());
    let n = dataset.n_features();
    let model = init_model(n, n, &cfg.architecture, cfg.seed)?;
    train_autoencoder(model, &set, &means, dataset.partition(), cfg)
}

pub fn init_model(n_in: usize, n_out: usize, arch: &Architecture, seed: u64) -> Result<MlpModel> {
    let mut r = rng::derived(seed, &[0x1417]);
    MlpModel::init(&arch.dims(n_in, n_out), arch.activation, &mut r)
}

/// Continues training `model` as a masked autoencoder on `set`.
pub fn train_autoencoder(
    mut model: MlpModel,
    set: &TrainSet<'_>,
    means: &FeatureMeans,
    partition: &LayerPartition,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = means.len();
    if model.n_inputs() != n || model.n_outputs() != n {
        return Err(config_err!("model shape {:?} does not match {n} features", model.dims()));
    }
    set.validate(n)?;
    let mut optim = cfg.optimizer.build()?;
    let mut grads = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..set.rows.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let n_groups = set.n_groups();
    let mut input = vec![0.0; n];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::derived(cfg.seed, &[0x5u64, epoch as u64]));
        let mut sums = [0.0f64; 3];
        let mut total_w = 0.0;
        let mut group_sum = vec![0.0; n_groups];
        let mut group_w = vec![0.0; n_groups];

        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let batch_w: f64 = batch.iter().map(|&i| set.weight(i)).sum();
            if batch_w == 0.0 {
                continue;
            }
            for &i in batch {
                let x = set.rows[i];
                let w = set.weight(i);
                let mut mrng = rng::derived(cfg.policy.seed(), &[cfg.seed, epoch as u64, i as u64]);
                let mask = cfg.policy.sample(n, partition, &mut mrng).union(&missing_mask(x));
                input.copy_from_slice(x);
                apply_mask_in_place(&mut input, &mask, means)?;
                let trace = model.forward_trace(&input)?;
                let loss = masked_loss(x, &trace.output, &mask, &cfg.loss);
                if !loss.total.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: alloc::format!("non-finite loss on row {i}"),
                    });
                }
                let flags = mask.to_flags(n);
                let g = masked_loss_gradient(x, &trace.output, &flags, &cfg.loss);
                model.backward_into(&trace, &g, w / batch_w, &mut grads);
                sums[0] += w * loss.total;
                sums[1] += w * loss.masked;
                sums[2] += w * loss.unmasked;
                total_w += w;
                group_sum[set.group(i)] += w * loss.total;
                group_w[set.group(i)] += w;
            }
            step(&mut model, &grads, &mut optim).map_err(|e| with_epoch(e, epoch))?;
        }
        log.push(epoch_log(epoch, sums, total_w, &group_sum, &group_w));
        if cfg.snapshot_every.is_some_and(|k| (epoch + 1) % k == 0) {
            snapshots.push((epoch, model.clone()));
        }
    }
    Ok(TrainOutcome { model, log, snapshots })
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Training { message, .. } => Error::Training { epoch, message },
        other => other,
    }
}

fn epoch_log(epoch: usize, sums: [f64; 3], total_w: f64, group_sum: &[f64], group_w: &[f64]) -> EpochLog {
    let d = if total_w > 0.0 { total_w } else { 1.0 };
    EpochLog {
        epoch,
        mean_loss: sums[0] / d,
        masked_loss: sums[1] / d,
        unmasked_loss: sums[2] / d,
        group_loss: group_sum
            .iter()
            .zip(group_w)
            .map(|(&s, &w)| if w > 0.0 { s / w } else { f64::NAN })
            .collect(),
    }
}

/// Settings of the supervised (input → target) loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossBase,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl SupervisedConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        SupervisedConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            loss: cfg.loss.base,
            optimizer: cfg.optimizer,
            seed: cfg.seed,
        }
    }
}

/// Trains `model` to map `inputs[i]` to `targets[i]` with the mean per-output
/// loss. NaN targets are skipped.
pub fn train_supervised(
    mut model: MlpModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    weights: Option<&[f64]>,
    groups: Option<&[usize]>,
    cfg: &SupervisedConfig,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(config_err!("epochs and batch_size must be >= 1"));
    }
    if inputs.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    if inputs.len() != targets.len() || weights.is_some_and(|w| w.len() != inputs.len()) {
        return Err(config_err!("inputs, targets and weights must align"));
    }
    let mut optim = cfg.optimizer.build()?;
    let mut grads = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let n_groups = groups.and_then(|g| g.iter().max().copied()).map_or(1, |m| m + 1);
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::derived(cfg.seed, &[0x5u64, epoch as u64]));
        let mut sum = 0.0;
        let mut total_w = 0.0;
        let mut group_sum = vec![0.0; n_groups];
        let mut group_w = vec![0.0; n_groups];
        for batch in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let batch_w: f64 = batch.iter().map(|&i| weight(i)).sum();
            if batch_w == 0.0 {
                continue;
            }
            for &i in batch {
                let (x, y) = (&inputs[i], &targets[i]);
                let trace = model.forward_trace(x)?;
                let valid = y.iter().filter(|v| !v.is_nan()).count().max(1) as f64;
                let mut loss = 0.0;
                let g: Vec<f64> = y
                    .iter()
                    .zip(&trace.output)
                    .map(|(&t, &p)| {
                        if t.is_nan() {
                            0.0
                        } else {
                            loss += cfg.loss.value(p, t);
                            cfg.loss.derivative(p, t) / valid
                        }
                    })
                    .collect();
                loss /= valid;
                if !loss.is_finite() {
                    return Err(Error::Training { epoch, message: alloc::format!("non-finite loss on row {i}") });
                }
                let w = weight(i);
                model.backward_into(&trace, &g, w / batch_w, &mut grads);
                sum += w * loss;
                total_w += w;
                let gi = groups.map_or(0, |g| g[i]);
                group_sum[gi] += w * loss;
                group_w[gi] += w;
            }
            step(&mut model, &grads, &mut optim).map_err(|e| with_epoch(e, epoch))?;
        }
        log.push(epoch_log(epoch, [sum, 0.0, 0.0], total_w, &group_sum, &group_w));
    }
    Ok(TrainOutcome { model, log, snapshots: Vec::new() })
}
