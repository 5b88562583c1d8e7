//! Distribution-shift analysis.
//!
//! For every patch of a layer, each complete year becomes a 12-dimensional
//! point (one coordinate per month). The largest eigenvalue of the points'
//! covariance measures how much the patch moves between years; patches that
//! dominate their 8-neighbourhood are selected for further study.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::dataset::{LayeredDataset, Timestamp};
use crate::error::{data_err, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::rng;

pub const MONTHS: usize = 12;

/// Yearly 12-month vectors of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct YearlyPoints {
    pub years: Vec<i32>,
    pub points: Vec<[f64; MONTHS]>,
    /// Years with at least one missing month.
    pub dropped: Vec<i32>,
}

/// Groups a monthly series into complete years; NaN counts as missing.
pub fn build_yearly_points(timestamps: &[Timestamp], values: &[f64]) -> Result<YearlyPoints> {
    if timestamps.len() != values.len() {
        return Err(data_err!("{} timestamps vs {} values", timestamps.len(), values.len()));
    }
    let mut by_year: BTreeMap<i32, [Option<f64>; MONTHS]> = BTreeMap::new();
    for (t, &v) in timestamps.iter().zip(values) {
        let slot = by_year.entry(t.year).or_insert([None; MONTHS]);
        if (1..=12).contains(&t.month) && !v.is_nan() {
            slot[usize::from(t.month) - 1] = Some(v);
        }
    }
    let mut out = YearlyPoints { years: Vec::new(), points: Vec::new(), dropped: Vec::new() };
    for (year, months) in by_year {
        if months.iter().all(Option::is_some) {
            out.years.push(year);
            out.points.push(months.map(|m| m.unwrap()));
        } else {
            out.dropped.push(year);
        }
    }
    if out.points.is_empty() {
        return Err(data_err!("no complete year in the series"));
    }
    Ok(out)
}

/// Yearly points of one dataset feature (layer patch).
pub fn yearly_points_for_feature(dataset: &LayeredDataset, feature: usize) -> Result<YearlyPoints> {
    let values: Vec<f64> = (0..dataset.n_observations()).map(|i| dataset.row(i)[feature]).collect();
    build_yearly_points(dataset.timestamps(), &values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub lambda1: f64,
    pub lambda2: f64,
    /// First two principal axes.
    pub axes: [[f64; MONTHS]; 2],
    /// `(u, v)` projections of the centered points.
    pub projections: Vec<(f64, f64)>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Population covariance of 12-dimensional points.
pub fn covariance(points: &[[f64; MONTHS]]) -> Matrix {
    let k = points.len() as f64;
    let mut mean = [0.0; MONTHS];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / k;
        }
    }
    let mut c = Matrix::zeros(MONTHS, MONTHS);
    for p in points {
        for i in 0..MONTHS {
            let di = p[i] - mean[i];
            for j in 0..MONTHS {
                c[(i, j)] += di * (p[j] - mean[j]) / k;
            }
        }
    }
    c
}

/// Top-two principal components of the points.
///
/// Axes are oriented so that their largest-magnitude component is positive.
pub fn pca_top(points: &[[f64; MONTHS]]) -> Result<PcaResult> {
    if points.len() < 2 {
        return Err(data_err!("PCA needs at least 2 points, got {}", points.len()));
    }
    let cov = covariance(points);
    let eig = symmetric_eigen(&cov)?;
    let mut axes = [[0.0; MONTHS]; 2];
    for (a, axis) in axes.iter_mut().enumerate() {
        for (i, v) in axis.iter_mut().enumerate() {
            *v = eig.vectors[(i, a)];
        }
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if libm::fabs(v) > libm::fabs(best) { v } else { best });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let k = points.len() as f64;
    let mut mean = [0.0; MONTHS];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / k;
        }
    }
    let projections = points
        .iter()
        .map(|p| {
            let mut uv = (0.0, 0.0);
            for i in 0..MONTHS {
                let c = p[i] - mean[i];
                uv.0 += c * axes[0][i];
                uv.1 += c * axes[1][i];
            }
            uv
        })
        .collect();
    // Covariance eigenvalues are non-negative; clamp round-off.
    let eigenvalues: Vec<f64> = eig.values.iter().map(|&v| v.max(0.0)).collect();
    Ok(PcaResult { lambda1: eigenvalues[0], lambda2: eigenvalues[1], axes, projections, eigenvalues })
}

/// Per-patch largest eigenvalue for one layer; NaN where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityMap {
    pub rows: usize,
    pub cols: usize,
    pub lambda1: Vec<f64>,
}

impl VariabilityMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.lambda1[r * self.cols + c]
    }

    /// Element-wise maximum over several layers of equal shape.
    pub fn max_over(maps: &[VariabilityMap]) -> Result<VariabilityMap> {
        let first = maps.first().ok_or_else(|| data_err!("no variability maps to combine"))?;
        if maps.iter().any(|m| m.rows != first.rows || m.cols != first.cols) {
            return Err(data_err!("variability maps differ in shape"));
        }
        let lambda1 = (0..first.lambda1.len())
            .map(|i| {
                maps.iter()
                    .map(|m| m.lambda1[i])
                    .filter(|v| !v.is_nan())
                    .fold(f64::NAN, |a, b| if a.is_nan() || b > a { b } else { a })
            })
            .collect();
        Ok(VariabilityMap { rows: first.rows, cols: first.cols, lambda1 })
    }
}

/// Computes λ₁ for every patch of layer `layer`.
pub fn variability_map(dataset: &LayeredDataset, layer: usize) -> Result<VariabilityMap> {
    let info = dataset
        .partition()
        .layers()
        .get(layer)
        .ok_or_else(|| data_err!("layer index {layer} out of range"))?;
    let lambda1 = info
        .range()
        .map(|f| match yearly_points_for_feature(dataset, f) {
            Ok(p) if p.points.len() >= 2 => pca_top(&p.points).map(|r| r.lambda1),
            _ => Ok(f64::NAN),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(VariabilityMap { rows: info.patch_rows, cols: info.patch_cols, lambda1 })
}

/// Non-maximum suppression over the 8-neighbourhood.
///
/// A patch survives when it beats every neighbour: strictly larger λ₁, or an
/// equal λ₁ and a lexicographically smaller `(row, col)`. Undefined (NaN)
/// patches act as −∞ and are never selected.
pub fn select_patches(map: &VariabilityMap) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..map.rows {
        for c in 0..map.cols {
            let v = map.get(r, c);
            if v.is_nan() {
                continue;
            }
            let mut keep = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= map.rows as i64 || nc >= map.cols as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    let w = map.get(nr, nc);
                    if w.is_nan() {
                        continue;
                    }
                    if w > v || (w == v && (nr, nc) < (r, c)) {
                        keep = false;
                        break 'nb;
                    }
                }
            }
            if keep {
                out.push((r, c));
            }
        }
    }
    out
}

/// Ordinary least squares line through `(i, yᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub slope: f64,
    pub intercept: f64,
}

pub fn linear_trend(series: &[f64]) -> Result<Trend> {
    let k = series.len();
    if k < 2 {
        return Err(data_err!("trend needs at least 2 observations, got {k}"));
    }
    let kf = k as f64;
    let mx = (kf - 1.0) / 2.0;
    let my = series.iter().sum::<f64>() / kf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    Ok(Trend { slope, intercept: my - slope * mx })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// H1: slope < 0.
    Less,
    /// H1: slope ≠ 0.
    TwoSided,
}

/// Permutation p-value of the OLS slope: the fraction of shuffled series
/// (plus the observed one) at least as extreme as the observed slope.
pub fn slope_permutation_p(series: &[f64], alternative: Alternative, permutations: usize, seed: u64) -> Result<f64> {
    let observed = linear_trend(series)?.slope;
    let mut r = rng::seeded(seed);
    let mut shuffled = series.to_vec();
    let mut extreme = 1usize;
    let tol = 1e-12 * (1.0 + libm::fabs(observed));
    for _ in 0..permutations {
        shuffled.shuffle(&mut r);
        let s = linear_trend(&shuffled)?.slope;
        let hit = match alternative {
            Alternative::Less => s <= observed + tol,
            Alternative::TwoSided => libm::fabs(s) >= libm::fabs(observed) - tol,
        };
        if hit {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / (permutations + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendReport {
    pub accuracies: Vec<f64>,
    pub trend: Trend,
}

/// Accuracy series (in chronological order) and its least-squares slope.
pub fn accuracy_trend(accuracies: Vec<f64>) -> Result<TrendReport> {
    let trend = linear_trend(&accuracies)?;
    Ok(TrendReport { accuracies, trend })
}

/// Brute-force check used by tests and callers: no two selected patches are
/// 8-adjacent.
pub fn no_adjacent_pairs(selected: &[(usize, usize)]) -> bool {
    for (i, a) in selected.iter().enumerate() {
        for b in &selected[i + 1..] {
            if a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1 {
                return false;
            }
        }
    }
    true
}

pub fn zeros_map(rows: usize, cols: usize) -> VariabilityMap {
    VariabilityMap { rows, cols, lambda1: vec![0.0; rows * cols] }
}
