//! Loss matrix and the importance summaries derived from it.
//!
//! Cell `(a, b)` averages the loss on feature `b` over every prediction in
//! which `b` was masked and `a` was visible. Low averages mean `a` helps to
//! reconstruct `b`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{FeatureMeans, LayerPartition};
use crate::error::{data_err, Error, Result};
use crate::masking::{apply_mask_in_place, missing_mask, MaskPolicy};
use crate::nnet::MlpModel;
use crate::rng;
use crate::training::LossBase;

/// Dense `n × n` running sums and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    n: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl LossMatrix {
    pub fn new(n: usize) -> Self {
        LossMatrix { n, sums: vec![0.0; n * n], counts: vec![0; n * n] }
    }

    pub fn from_parts(n: usize, sums: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if sums.len() != n * n || counts.len() != n * n {
            return Err(data_err!("loss matrix buffers do not match n={n}"));
        }
        Ok(LossMatrix { n, sums, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, a: usize, b: usize) -> u64 {
        self.counts[a * self.n + b]
    }

    /// Average loss of masked `b` given visible `a`; `None` if never observed.
    pub fn average(&self, a: usize, b: usize) -> Option<f64> {
        let i = a * self.n + b;
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    /// Records one prediction: `visible` features against masked ones with
    /// their per-feature losses.
    pub fn record(&mut self, visible: &[usize], masked: &[(usize, f64)]) {
        for &a in visible {
            let row = a * self.n;
            for &(b, loss) in masked {
                self.sums[row + b] += loss;
                self.counts[row + b] += 1;
            }
        }
    }

    /// Adds another shard's sums and counts.
    pub fn merge(&mut self, other: &LossMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Internal("merging loss matrices of different size".into()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn mean_of_defined(&self, cells: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
        let (mut s, mut c) = (0.0, 0usize);
        for (a, b) in cells {
            if let Some(v) = self.average(a, b) {
                s += v;
                c += 1;
            }
        }
        (c > 0).then(|| s / c as f64)
    }

    pub fn summarize(&self, mode: &ImportanceMode, partition: &LayerPartition) -> Result<ImportanceReport> {
        let n = self.n;
        let raw: Vec<Option<f64>> = match mode {
            ImportanceMode::Feature(t) => {
                if *t >= n {
                    return Err(data_err!("target feature {t} out of range"));
                }
                (0..n).map(|a| self.average(a, *t)).collect()
            }
            ImportanceMode::Layer(name) => {
                let l = partition
                    .index_of(name)
                    .ok_or_else(|| data_err!("unknown layer {name}"))?;
                let range = partition.layers()[l].range();
                (0..n)
                    .map(|a| self.mean_of_defined(range.clone().map(|b| (a, b))))
                    .collect()
            }
            ImportanceMode::Global => (0..n).map(|a| self.mean_of_defined((0..n).map(|b| (a, b)))).collect(),
        };
        if raw.iter().all(Option::is_none) {
            return Err(match mode {
                ImportanceMode::Feature(t) => data_err!("feature {t} never masked under this policy"),
                _ => data_err!("no defined loss-matrix cells for {}", mode.label()),
            });
        }
        Ok(ImportanceReport { mode: mode.clone(), average_loss: raw.clone(), importance: normalize(&raw) })
    }
}

/// Negates and min-max scales the defined entries to `[0, 1]`. A constant
/// vector (including a single defined entry) maps to 0.
fn normalize(avg: &[Option<f64>]) -> Vec<Option<f64>> {
    let neg = avg.iter().map(|v| v.map(|x| -x));
    let defined = || avg.iter().flatten().map(|x| -x);
    let lo = defined().fold(f64::INFINITY, f64::min);
    let hi = defined().fold(f64::NEG_INFINITY, f64::max);
    neg.map(|v| {
        v.map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImportanceMode {
    /// Column `t`: what helps to predict feature `t`.
    Feature(usize),
    /// Row averages over the named layer's columns.
    Layer(String),
    /// Full row averages.
    Global,
}

impl ImportanceMode {
    pub fn label(&self) -> String {
        match self {
            ImportanceMode::Feature(t) => alloc::format!("feature:{t}"),
            ImportanceMode::Layer(l) => alloc::format!("layer:{l}"),
            ImportanceMode::Global => String::from("global"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub mode: ImportanceMode,
    /// Averaged loss per feature before negation; `None` where undefined.
    pub average_loss: Vec<Option<f64>>,
    /// Importance in `[0, 1]`, higher is more important.
    pub importance: Vec<Option<f64>>,
}

impl ImportanceReport {
    /// Feature indices sorted from most to least important (defined only).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.importance.len()).filter(|&j| self.importance[j].is_some()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (self.average_loss[a].unwrap(), self.average_loss[b].unwrap());
            x.total_cmp(&y).then(a.cmp(&b))
        });
        idx
    }

    /// One row-major patch grid per layer; undefined cells are NaN.
    pub fn to_maps(&self, partition: &LayerPartition) -> Vec<(String, usize, usize, Vec<f64>)> {
        partition
            .layers()
            .iter()
            .map(|l| {
                let grid = l.range().map(|j| self.importance[j].unwrap_or(f64::NAN)).collect();
                (l.name.clone(), l.patch_rows, l.patch_cols, grid)
            })
            .collect()
    }
}

/// Runs `iterations` passes over `rows`; each observation gets a fresh mask
/// per pass. Per-feature losses are unweighted `base` losses.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_loss_matrix(
    model: &MlpModel,
    rows: &[&[f64]],
    means: &FeatureMeans,
    partition: &LayerPartition,
    policy: &MaskPolicy,
    iterations: usize,
    base: LossBase,
    seed: u64,
) -> Result<LossMatrix> {
    accumulate_shard(model, rows, means, partition, policy, 0..iterations, base, seed)
}

/// Accumulates the passes in `passes`; shards over disjoint pass ranges
/// merge to the same matrix as a single run.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_shard(
    model: &MlpModel,
    rows: &[&[f64]],
    means: &FeatureMeans,
    partition: &LayerPartition,
    policy: &MaskPolicy,
    passes: core::ops::Range<usize>,
    base: LossBase,
    seed: u64,
) -> Result<LossMatrix> {
    let n = means.len();
    let mut matrix = LossMatrix::new(n);
    let mut input = vec![0.0; n];
    let mut visible = Vec::with_capacity(n);
    let mut masked = Vec::with_capacity(n);
    for pass in passes {
        for (i, x) in rows.iter().enumerate() {
            if x.len() != n {
                return Err(data_err!("row {i} has {} features, expected {n}", x.len()));
            }
            let mut r = rng::derived(seed, &[pass as u64, i as u64]);
            let sampled = policy.sample(n, partition, &mut r);
            let missing = missing_mask(x);
            let mask = sampled.union(&missing);
            input.copy_from_slice(x);
            apply_mask_in_place(&mut input, &mask, means)?;
            let p = model.forward(&input)?;
            let flags = mask.to_flags(n);
            visible.clear();
            masked.clear();
            for j in 0..n {
                if !flags[j] {
                    visible.push(j);
                } else if !missing.contains(j) {
                    masked.push((j, base.value(p[j], x[j])));
                }
            }
            matrix.record(&visible, &masked);
        }
    }
    Ok(matrix)
}
