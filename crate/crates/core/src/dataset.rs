//! Multi-layer observation datasets.
//!
//! Raw grids are reduced to patch averages, flattened into one feature vector
//! per timestamp (layers in manifest order, patches row-major inside a
//! layer), and normalized per layer with training-split statistics.
//!
//! Missing values are NaN in memory. Patch averaging skips them; a patch with
//! no valid pixel stays NaN and is treated downstream as a permanently masked
//! feature.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{config_err, data_err, Result};
use crate::linalg::Matrix;

/// One layer of the grid manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Year and month (1..=12) of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    pub year: i32,
    pub month: u8,
}

impl Timestamp {
    pub fn new(year: i32, month: u8) -> Self {
        Timestamp { year, month }
    }
}

/// Layout of the raw gridded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerManifest {
    pub layers: Vec<GridLayer>,
    pub patch_size: usize,
    pub timestamps: Vec<Timestamp>,
}

impl LayerManifest {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(config_err!("manifest has no layers"));
        }
        if self.timestamps.is_empty() {
            return Err(config_err!("manifest has no timestamps"));
        }
        if self.patch_size == 0 {
            return Err(config_err!("patch_size must be positive"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return Err(config_err!("layer {} has an empty grid", l.name));
            }
            if l.rows % self.patch_size != 0 || l.cols % self.patch_size != 0 {
                return Err(config_err!(
                    "layer {} grid {}x{} is not divisible by patch size {}",
                    l.name,
                    l.rows,
                    l.cols,
                    self.patch_size
                ));
            }
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(config_err!("duplicate layer name {}", l.name));
            }
        }
        for t in &self.timestamps {
            if !(1..=12).contains(&t.month) {
                return Err(config_err!("invalid month {} in timestamp {}", t.month, t.year));
            }
        }
        Ok(())
    }

    /// Partition of the flattened patch-averaged feature vector.
    pub fn partition(&self) -> LayerPartition {
        LayerPartition::new(
            self.layers
                .iter()
                .map(|l| (l.name.clone(), l.rows / self.patch_size, l.cols / self.patch_size)),
        )
    }
}

/// A named contiguous block of features laid out as a patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub start: usize,
}

impl LayerInfo {
    pub fn len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Where a feature lives: layer index and patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureCoord {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

/// Disjoint, covering assignment of feature indices `[0, n)` to layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    layers: Vec<LayerInfo>,
    n: usize,
}

impl LayerPartition {
    pub fn new(layers: impl IntoIterator<Item = (String, usize, usize)>) -> Self {
        let mut start = 0;
        let layers = layers
            .into_iter()
            .map(|(name, patch_rows, patch_cols)| {
                let info = LayerInfo { name, patch_rows, patch_cols, start };
                start += info.len();
                info
            })
            .collect();
        LayerPartition { layers, n: start }
    }

    /// Single-row layers of the given sizes, named `L0`, `L1`, ...
    pub fn flat(sizes: &[usize]) -> Self {
        Self::new(sizes.iter().enumerate().map(|(i, &s)| (alloc::format!("L{i}"), 1, s)))
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer_of(&self, feature: usize) -> Option<usize> {
        if feature >= self.n {
            return None;
        }
        Some(self.layers.partition_point(|l| l.start + l.len() <= feature))
    }

    pub fn coord(&self, feature: usize) -> Option<FeatureCoord> {
        let layer = self.layer_of(feature)?;
        let info = &self.layers[layer];
        let local = feature - info.start;
        Some(FeatureCoord { layer, row: local / info.patch_cols, col: local % info.patch_cols })
    }

    pub fn feature_index(&self, coord: FeatureCoord) -> Option<usize> {
        let info = self.layers.get(coord.layer)?;
        if coord.row >= info.patch_rows || coord.col >= info.patch_cols {
            return None;
        }
        Some(info.start + coord.row * info.patch_cols + coord.col)
    }

    /// Feature indices of the named layers, ascending.
    pub fn indices_of(&self, names: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for name in names {
            let i = self
                .index_of(name)
                .ok_or_else(|| config_err!("unknown layer {name}"))?;
            out.extend(self.layers[i].range());
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-layer normalization statistics (population std).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// k observations × n features, partitioned into layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredDataset {
    data: Matrix,
    partition: LayerPartition,
    timestamps: Vec<Timestamp>,
    split: Vec<Split>,
    norm_stats: Option<Vec<NormStats>>,
}

impl LayeredDataset {
    pub fn new(
        data: Matrix,
        partition: LayerPartition,
        timestamps: Vec<Timestamp>,
        split: Vec<Split>,
    ) -> Result<Self> {
        if data.cols() != partition.n_features() {
            return Err(data_err!(
                "data has {} features, partition covers {}",
                data.cols(),
                partition.n_features()
            ));
        }
        if timestamps.len() != data.rows() || split.len() != data.rows() {
            return Err(data_err!(
                "{} observations but {} timestamps and {} split tags",
                data.rows(),
                timestamps.len(),
                split.len()
            ));
        }
        Ok(LayeredDataset { data, partition, timestamps, split, norm_stats: None })
    }

    /// Builds the dataset from raw grids: `grids[t][layer]` holds the
    /// row-major grid of layer `layer` at timestamp `t`. The last
    /// `test_count` timestamps form the test split.
    pub fn from_grids(
        manifest: &LayerManifest,
        grids: &[Vec<Vec<f64>>],
        test_count: usize,
    ) -> Result<Self> {
        manifest.validate()?;
        let partition = manifest.partition();
        let k = manifest.timestamps.len();
        if grids.len() != k {
            return Err(data_err!("expected grids for {k} timestamps, got {}", grids.len()));
        }
        if test_count > k {
            return Err(config_err!("test split of {test_count} exceeds {k} timestamps"));
        }
        let n = partition.n_features();
        let mut data = Matrix::zeros(k, n);
        for (t, per_layer) in grids.iter().enumerate() {
            if per_layer.len() != manifest.layers.len() {
                return Err(data_err!("timestamp {t}: expected {} layers", manifest.layers.len()));
            }
            for (li, (layer, grid)) in manifest.layers.iter().zip(per_layer).enumerate() {
                if grid.len() != layer.rows * layer.cols {
                    return Err(data_err!(
                        "layer {} at timestamp {t} has {} values, expected {}",
                        layer.name,
                        grid.len(),
                        layer.rows * layer.cols
                    ));
                }
                let patches = patch_average(grid, layer.rows, layer.cols, manifest.patch_size)?;
                let range = partition.layers()[li].range();
                data.row_mut(t)[range].copy_from_slice(&patches);
            }
        }
        let split = (0..k)
            .map(|t| if t + test_count >= k { Split::Test } else { Split::Train })
            .map(|s| if test_count == 0 { Split::Train } else { s })
            .collect();
        Self::new(data, partition, manifest.timestamps.clone(), split)
    }

    pub fn n_features(&self) -> usize {
        self.data.cols()
    }

    pub fn n_observations(&self) -> usize {
        self.data.rows()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn norm_stats(&self) -> Option<&[NormStats]> {
        self.norm_stats.as_deref()
    }

    pub fn feature_coords(&self, feature: usize) -> Option<FeatureCoord> {
        self.partition.coord(feature)
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.n_observations()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn rows_of(&self, which: Split) -> Vec<Vec<f64>> {
        self.indices(which).into_iter().map(|i| self.row(i).to_vec()).collect()
    }

    /// Reassigns the split so that the last `test_count` observations are test.
    pub fn with_test_suffix(mut self, test_count: usize) -> Result<Self> {
        let k = self.n_observations();
        if test_count > k {
            return Err(config_err!("test split of {test_count} exceeds {k} observations"));
        }
        self.split = (0..k)
            .map(|t| if t + test_count >= k && test_count > 0 { Split::Test } else { Split::Train })
            .collect();
        Ok(self)
    }

    /// Per-layer `(mean, std)` over valid training-split values.
    pub fn training_layer_stats(&self) -> Result<Vec<NormStats>> {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return Err(config_err!("training split is empty"));
        }
        let mut stats = Vec::with_capacity(self.partition.len());
        for layer in self.partition.layers() {
            let mut count = 0usize;
            let mut sum = 0.0;
            for &i in &train {
                for &v in &self.row(i)[layer.range()] {
                    if !v.is_nan() {
                        count += 1;
                        sum += v;
                    }
                }
            }
            if count == 0 {
                return Err(data_err!("layer {} has no valid training values", layer.name));
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for &i in &train {
                for &v in &self.row(i)[layer.range()] {
                    if !v.is_nan() {
                        ss += (v - mean) * (v - mean);
                    }
                }
            }
            let std = libm::sqrt(ss / count as f64);
            if !(std > 0.0) {
                return Err(data_err!("layer {} has zero variance on the training split", layer.name));
            }
            stats.push(NormStats { mean, std });
        }
        Ok(stats)
    }

    /// Normalizes every layer to zero mean and unit (population) std using
    /// training-split statistics; test rows use the same transform.
    pub fn normalize_layers(&self) -> Result<LayeredDataset> {
        let stats = self.training_layer_stats()?;
        Ok(self.apply_norm(&stats))
    }

    /// Applies the given per-layer transform `(v - mean) / std` and records it.
    pub fn apply_norm(&self, stats: &[NormStats]) -> LayeredDataset {
        let mut out = self.clone();
        for (layer, s) in self.partition.layers().iter().zip(stats) {
            for i in 0..out.n_observations() {
                for v in &mut out.data.row_mut(i)[layer.range()] {
                    *v = (*v - s.mean) / s.std;
                }
            }
        }
        out.norm_stats = Some(stats.to_vec());
        out
    }

    /// Maps normalized values back to raw units.
    pub fn denormalize(&self, feature: usize, value: f64) -> f64 {
        match (&self.norm_stats, self.partition.layer_of(feature)) {
            (Some(stats), Some(l)) => value * stats[l].std + stats[l].mean,
            _ => value,
        }
    }

    pub fn compute_feature_means(&self) -> Result<FeatureMeans> {
        let train = self.indices(Split::Train);
        if train.is_empty() {
            return Err(config_err!("training split is empty"));
        }
        let rows: Vec<&[f64]> = train.iter().map(|&i| self.row(i)).collect();
        Ok(FeatureMeans::from_rows(&rows, self.n_features()))
    }

    /// Appends observations (used for pseudo-labeled rows).
    pub fn append_rows(&mut self, rows: &[Vec<f64>], timestamps: &[Timestamp], split: Split) -> Result<()> {
        let n = self.n_features();
        if rows.len() != timestamps.len() {
            return Err(data_err!("row and timestamp counts differ"));
        }
        let mut data = self.data.as_slice().to_vec();
        for r in rows {
            if r.len() != n {
                return Err(data_err!("appended row has {} features, expected {n}", r.len()));
            }
            data.extend_from_slice(r);
        }
        let k = self.n_observations() + rows.len();
        self.data = Matrix::from_vec(k, n, data)?;
        self.timestamps.extend_from_slice(timestamps);
        self.split.extend(std::iter::repeat_n(split, rows.len()));
        Ok(())
    }
}

/// Training-split mean of every feature; the imputation values for masking.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMeans {
    pub means: Vec<f64>,
    pub source: String,
}

impl FeatureMeans {
    /// Column means over valid values. A feature with no valid value gets 0,
    /// the normalized layer mean.
    pub fn from_rows(rows: &[&[f64]], n: usize) -> Self {
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sums[j] += v;
                    counts[j] += 1;
                }
            }
        }
        let means = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        FeatureMeans { means, source: String::from("train-split") }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Block means of `patch_size × patch_size` tiles of a row-major grid.
/// NaN cells are skipped; an all-NaN tile yields NaN.
pub fn patch_average(grid: &[f64], rows: usize, cols: usize, patch_size: usize) -> Result<Vec<f64>> {
    if patch_size == 0 || !rows.is_multiple_of(patch_size) || !cols.is_multiple_of(patch_size) {
        return Err(config_err!("grid {rows}x{cols} is not divisible by patch size {patch_size}"));
    }
    if grid.len() != rows * cols {
        return Err(data_err!("grid has {} values, expected {}", grid.len(), rows * cols));
    }
    let (pr, pc) = (rows / patch_size, cols / patch_size);
    let mut sums = vec![0.0; pr * pc];
    let mut counts = vec![0usize; pr * pc];
    for r in 0..rows {
        let base = (r / patch_size) * pc;
        for (c, &v) in grid[r * cols..(r + 1) * cols].iter().enumerate() {
            if !v.is_nan() {
                sums[base + c / patch_size] += v;
                counts[base + c / patch_size] += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}
