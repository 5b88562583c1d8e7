//! Task-specific comparison models: least squares, lasso and a
//! parameter-matched MLP, each mapping input layers to output layers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::{LayerPartition, LayeredDataset, Split};
use crate::error::{config_err, Error, Result};
use crate::linalg::{cholesky_solve, dot, Matrix};
use crate::nnet::{parameter_count, Activation, Dense, MlpModel};
use crate::training::{init_model, train_supervised, Architecture, SupervisedConfig, TrainOutcome};

/// Which layers are given and which are predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub input_layers: Vec<String>,
    pub output_layers: Vec<String>,
}

/// Feature indices of a validated task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskIndices {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

impl TaskSpec {
    /// Output layers used for the Earth-observation comparison runs.
    pub const EARTH_OUTPUTS: [&'static str; 7] = ["FIRE", "LAI", "LSTD_AN", "LSTN_AN", "AOD", "CO", "WV"];

    pub fn new(inputs: &[&str], outputs: &[&str]) -> Self {
        TaskSpec {
            input_layers: inputs.iter().map(|s| String::from(*s)).collect(),
            output_layers: outputs.iter().map(|s| String::from(*s)).collect(),
        }
    }

    /// Every layer not listed in `outputs` becomes an input.
    pub fn complement(partition: &LayerPartition, outputs: &[&str]) -> Self {
        let input_layers = partition
            .layers()
            .iter()
            .filter(|l| !outputs.contains(&l.name.as_str()))
            .map(|l| l.name.clone())
            .collect();
        TaskSpec { input_layers, output_layers: outputs.iter().map(|s| String::from(*s)).collect() }
    }

    pub fn resolve(&self, partition: &LayerPartition) -> Result<TaskIndices> {
        if self.input_layers.is_empty() || self.output_layers.is_empty() {
            return Err(config_err!("task needs at least one input and one output layer"));
        }
        if let Some(l) = self.input_layers.iter().find(|l| self.output_layers.contains(l)) {
            return Err(config_err!("layer {l} is both input and output"));
        }
        Ok(TaskIndices {
            inputs: partition.indices_of(&self.input_layers)?,
            outputs: partition.indices_of(&self.output_layers)?,
        })
    }
}

impl TaskIndices {
    pub fn gather_inputs(&self, x: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|&j| x[j]).collect()
    }

    pub fn gather_outputs(&self, x: &[f64]) -> Vec<f64> {
        self.outputs.iter().map(|&j| x[j]).collect()
    }
}

/// `y = W x + b`; `l1_penalty` is 0 for plain least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub l1_penalty: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weights.mul_vec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    /// Same parameters as a single-layer identity network.
    pub fn to_mlp(&self) -> MlpModel {
        let layer = Dense { weights: self.weights.clone(), biases: self.bias.clone() };
        MlpModel::from_layers(vec![layer], Activation::Identity).expect("one layer always chains")
    }

    pub fn from_mlp(model: &MlpModel, l1_penalty: f64) -> Result<Self> {
        match model.layers() {
            [layer] => Ok(LinearModel { weights: layer.weights.clone(), bias: layer.biases.clone(), l1_penalty }),
            _ => Err(config_err!("a linear model has exactly one layer")),
        }
    }
}

/// Ridge added to the normal equations for conditioning.
pub const OLS_RIDGE: f64 = 1e-8;
pub const LASSO_TOLERANCE: f64 = 1e-6;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn column_means(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut m = vec![0.0; width];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    let k = rows.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= k);
    m
}

fn check_design(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<(usize, usize)> {
    if x.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    if x.len() != y.len() {
        return Err(config_err!("{} input rows vs {} target rows", x.len(), y.len()));
    }
    let (d, o) = (x[0].len(), y[0].len());
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != o) {
        return Err(Error::Data("ragged design matrix".into()));
    }
    if x.iter().chain(y).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("design matrix contains non-finite values".into()));
    }
    Ok((d, o))
}

/// Least squares (penalty 0, via ridge-stabilized normal equations on
/// centered data) or lasso (coordinate descent) for every output.
pub fn fit_linear(x: &[Vec<f64>], y: &[Vec<f64>], l1_penalty: f64) -> Result<LinearModel> {
    if !(l1_penalty >= 0.0) {
        return Err(config_err!("l1 penalty {l1_penalty} must be non-negative"));
    }
    if l1_penalty > 0.0 {
        return fit_lasso(x, y, l1_penalty, LASSO_TOLERANCE, LASSO_MAX_SWEEPS).map(|f| f.model);
    }
    let (d, o) = check_design(x, y)?;
    let xm = column_means(x, d);
    let ym = column_means(y, o);
    let mut gram = Matrix::zeros(d, d);
    let mut rhs = Matrix::zeros(d, o);
    let mut xc = vec![0.0; d];
    for (xr, yr) in x.iter().zip(y) {
        for (c, (v, m)) in xc.iter_mut().zip(xr.iter().zip(&xm)) {
            *c = v - m;
        }
        for i in 0..d {
            if xc[i] == 0.0 {
                continue;
            }
            for j in i..d {
                gram[(i, j)] += xc[i] * xc[j];
            }
            for (t, (yv, ymv)) in yr.iter().zip(&ym).enumerate() {
                rhs[(i, t)] += xc[i] * (yv - ymv);
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += OLS_RIDGE;
    }
    let w = cholesky_solve(&gram, &rhs)?.transpose();
    let bias = (0..o).map(|t| ym[t] - dot(w.row(t), &xm)).collect();
    Ok(LinearModel { weights: w, bias, l1_penalty: 0.0 })
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub model: LinearModel,
    /// Sweeps used per output.
    pub sweeps: Vec<usize>,
}

/// Coordinate descent on `(1/2k)·‖y − Xw − b‖² + λ‖w‖₁` per output column.
///
/// Stops when the duality gap falls below `tol · ‖y_c‖²/(2k)` (absolute
/// `tol` for zero targets). Running out of sweeps is an error.
pub fn fit_lasso(x: &[Vec<f64>], y: &[Vec<f64>], penalty: f64, tol: f64, max_sweeps: usize) -> Result<LassoFit> {
    let (d, o) = check_design(x, y)?;
    let k = x.len();
    let kf = k as f64;
    let xm = column_means(x, d);
    let ym = column_means(y, o);
    // column-major centered design
    let cols: Vec<Vec<f64>> = (0..d).map(|j| x.iter().map(|r| r[j] - xm[j]).collect()).collect();
    let sq: Vec<f64> = cols.iter().map(|c| dot(c, c) / kf).collect();
    let mut weights = Matrix::zeros(o, d);
    let mut sweeps = Vec::with_capacity(o);
    for t in 0..o {
        let yc: Vec<f64> = y.iter().map(|r| r[t] - ym[t]).collect();
        let (w, used) = lasso_single(&cols, &sq, &yc, penalty, tol, max_sweeps)?;
        weights.row_mut(t).copy_from_slice(&w);
        sweeps.push(used);
    }
    let bias = (0..o).map(|t| ym[t] - dot(weights.row(t), &xm)).collect();
    Ok(LassoFit { model: LinearModel { weights, bias, l1_penalty: penalty }, sweeps })
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn lasso_single(
    cols: &[Vec<f64>],
    sq: &[f64],
    y: &[f64],
    penalty: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, usize)> {
    let d = cols.len();
    let kf = y.len() as f64;
    let mut w = vec![0.0; d];
    let mut resid = y.to_vec();
    let y_energy = dot(y, y) / (2.0 * kf);
    let threshold = if y_energy > 0.0 { tol * y_energy } else { tol };
    for sweep in 1..=max_sweeps {
        let mut max_step: f64 = 0.0;
        for j in 0..d {
            if sq[j] == 0.0 {
                continue;
            }
            let old = w[j];
            let rho = dot(&cols[j], &resid) / kf + sq[j] * old;
            let new = soft_threshold(rho, penalty) / sq[j];
            if new != old {
                let delta = new - old;
                for (r, c) in resid.iter_mut().zip(&cols[j]) {
                    *r -= delta * c;
                }
                w[j] = new;
                max_step = max_step.max(libm::fabs(delta));
            }
        }
        let gap = duality_gap(cols, y, &resid, &w, penalty);
        if gap <= threshold || (penalty == 0.0 && max_step <= tol * 1e-3) {
            return Ok((w, sweep));
        }
    }
    Err(Error::Fit(alloc::format!("lasso did not converge within {max_sweeps} sweeps")))
}

/// Duality gap of the lasso objective at `w` with residual `r = y − Xw`.
fn duality_gap(cols: &[Vec<f64>], y: &[f64], resid: &[f64], w: &[f64], penalty: f64) -> f64 {
    let kf = y.len() as f64;
    let primal = dot(resid, resid) / (2.0 * kf) + penalty * w.iter().map(|v| libm::fabs(*v)).sum::<f64>();
    if penalty == 0.0 {
        // dual is unbounded without a penalty; fall back to the gradient norm
        let g = cols.iter().map(|c| libm::fabs(dot(c, resid)) / kf).fold(0.0, f64::max);
        return g;
    }
    let corr = cols.iter().map(|c| libm::fabs(dot(c, resid)) / kf).fold(0.0, f64::max);
    let scale = if corr > penalty { penalty / corr } else { 1.0 };
    let dual = dot(resid, y) * scale / kf - scale * scale * dot(resid, resid) / (2.0 * kf);
    primal - dual
}

/// Chooses the penalty with the lowest validation L1 error; ties go to the
/// smaller penalty. Penalties whose fit does not converge score NaN and are
/// never chosen.
pub fn select_lasso_penalty(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    val_x: &[Vec<f64>],
    val_y: &[Vec<f64>],
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(config_err!("empty penalty grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &p in grid {
        let m = match fit_linear(train_x, train_y, p) {
            Ok(m) => m,
            Err(Error::Fit(_)) => {
                scores.push((p, f64::NAN));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut err = 0.0;
        let mut count = 0usize;
        for (xv, yv) in val_x.iter().zip(val_y) {
            for (pred, truth) in m.predict(xv).iter().zip(yv) {
                err += libm::fabs(pred - truth);
                count += 1;
            }
        }
        scores.push((p, err / count.max(1) as f64));
    }
    let best = scores
        .iter()
        .copied()
        .filter(|s| !s.1.is_nan())
        .fold(None::<(f64, f64)>, |best, s| match best {
            Some(b) if b.1 <= s.1 => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| Error::Fit(String::from("lasso did not converge for any penalty on the grid")))?;
    Ok((best.0, scores))
}

/// Hidden width `h` of `in → h → h → out` whose parameter count is closest to
/// `budget`; errors when no width lands within ±2%.
pub fn width_for_budget(inputs: usize, outputs: usize, budget: usize) -> Result<usize> {
    let count = |h: usize| parameter_count(&[inputs, h, h, outputs]);
    let (mut lo, mut hi) = (1usize, 1usize);
    while count(hi) < budget {
        hi *= 2;
        if hi > 1 << 24 {
            return Err(config_err!("parameter budget {budget} is out of reach"));
        }
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if count(mid) < budget {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let candidates = [lo.saturating_sub(1).max(1), lo];
    let best = candidates
        .into_iter()
        .min_by_key(|&h| count(h).abs_diff(budget))
        .unwrap();
    let rel = count(best).abs_diff(budget) as f64 / budget as f64;
    if rel > 0.02 {
        return Err(config_err!(
            "parameter budget {budget} not reachable within 2% (closest width {best} gives {})",
            count(best)
        ));
    }
    Ok(best)
}

/// A trained task network together with its feature selection.
#[derive(Debug, Clone)]
pub struct TaskMlp {
    pub model: MlpModel,
    pub task: TaskIndices,
    pub log: Vec<crate::training::EpochLog>,
}

impl TaskMlp {
    pub fn predict(&self, x_full: &[f64]) -> Result<Vec<f64>> {
        self.model.forward(&self.task.gather_inputs(x_full))
    }
}

/// Trains `|inputs| → h → h → |outputs|` with `h` chosen for `param_budget`.
pub fn fit_task_mlp(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    weights: Option<&[f64]>,
    task: &TaskIndices,
    param_budget: usize,
    activation: Activation,
    cfg: &SupervisedConfig,
) -> Result<(MlpModel, TrainOutcome)> {
    let h = width_for_budget(task.inputs.len(), task.outputs.len(), param_budget)?;
    let arch = Architecture { hidden: Some(vec![h, h]), activation };
    let model = init_model(task.inputs.len(), task.outputs.len(), &arch, cfg.seed)?;
    let out = train_supervised(model, inputs, targets, weights, None, cfg)?;
    Ok((out.model.clone(), out))
}

/// Task inputs/targets of a split (rows with missing values are skipped).
pub fn task_rows(dataset: &LayeredDataset, task: &TaskIndices, split: Split) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in dataset.indices(split) {
        let row = dataset.row(i);
        let x = task.gather_inputs(row);
        let y = task.gather_outputs(row);
        if x.iter().chain(&y).all(|v| v.is_finite()) {
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys)
}
