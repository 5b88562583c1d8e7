//! Implicit ensembles: one trained autoencoder queried under `l` random
//! supersets of the given mask, predictions aggregated.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{FeatureMeans, LayerPartition};
use crate::error::{config_err, Result};
use crate::masking::{apply_mask, Mask, MaskPolicy};
use crate::nnet::MlpModel;
use crate::rng;

/// Combines the member predictions `q₀ … q_{l-1}` into one vector.
pub trait Aggregator {
    fn aggregate(&self, members: &[Vec<f64>]) -> Vec<f64>;
}

/// Arithmetic mean, summed in member order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAggregator;

impl Aggregator for MeanAggregator {
    fn aggregate(&self, members: &[Vec<f64>]) -> Vec<f64> {
        let Some(first) = members.first() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; first.len()];
        for q in members {
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v;
            }
        }
        let l = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= l);
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub iterations: usize,
    /// Inference-time masking distribution; its target includes the base mask.
    pub policy: MaskPolicy,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(iterations: usize, policy: MaskPolicy, seed: u64) -> Result<Self> {
        if iterations == 0 {
            return Err(config_err!("ensemble needs at least one iteration"));
        }
        Ok(EnsembleConfig { iterations, policy, seed })
    }

    /// Default ensemble: `l = 32` at 60% masking.
    pub fn default_with_seed(seed: u64) -> Self {
        EnsembleConfig { iterations: 32, policy: MaskPolicy::fixed(0.6, seed).unwrap(), seed }
    }
}

/// Member masks and predictions of one ensemble call.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub masks: Vec<Mask>,
    pub members: Vec<Vec<f64>>,
    pub prediction: Vec<f64>,
}

/// Ensemble prediction for one observation.
///
/// `x_masked` must already carry the imputed values on `base_mask`. The
/// aggregate covers all `n` features; callers that want known inputs passed
/// through overwrite the coordinates outside `base_mask` themselves.
/// `stream` selects an independent random stream (e.g. the row index).
pub fn ensemble_predict(
    model: &MlpModel,
    x_masked: &[f64],
    base_mask: &Mask,
    means: &FeatureMeans,
    partition: &LayerPartition,
    cfg: &EnsembleConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    Ok(ensemble_run(model, x_masked, base_mask, means, partition, cfg, stream, &MeanAggregator)?.prediction)
}

/// Like [`ensemble_predict`] but keeps every member and accepts any aggregator.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_run(
    model: &MlpModel,
    x_masked: &[f64],
    base_mask: &Mask,
    means: &FeatureMeans,
    partition: &LayerPartition,
    cfg: &EnsembleConfig,
    stream: u64,
    aggregator: &dyn Aggregator,
) -> Result<EnsembleRun> {
    if cfg.iterations == 0 {
        return Err(config_err!("ensemble needs at least one iteration"));
    }
    let n = x_masked.len();
    let mut masks = Vec::with_capacity(cfg.iterations);
    let mut members = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let mut r = rng::derived(cfg.seed, &[stream, i as u64]);
        let mi = cfg.policy.sample_superset(base_mask, n, partition, &mut r)?;
        let extra = mi.difference(base_mask);
        let f = apply_mask(x_masked, &extra, means)?;
        members.push(model.forward(&f)?);
        masks.push(mi);
    }
    let prediction = aggregator.aggregate(&members);
    Ok(EnsembleRun { masks, members, prediction })
}
