//! Accuracy metric, task predictors and the masking sweep.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::baselines::{LinearModel, TaskIndices};
use crate::dataset::{FeatureMeans, LayerPartition};
use crate::ensemble::{ensemble_predict, EnsembleConfig};
use crate::error::{config_err, data_err, Result};
use crate::masking::{apply_mask, missing_mask, target_size, Mask, MaskKind};
use crate::nnet::MlpModel;
use crate::rng;
use crate::shift::{accuracy_trend, TrendReport};

/// `100 · (1 − mean_{j∈scope} |predⱼ − truthⱼ|)`; NaN truths are skipped.
pub fn accuracy(truth: &[f64], pred: &[f64], scope: &[usize]) -> Result<f64> {
    if scope.is_empty() {
        return Err(data_err!("accuracy scope is empty"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for &j in scope {
        let (t, p) = (truth[j], pred[j]);
        if !t.is_nan() {
            sum += libm::fabs(p - t);
            count += 1;
        }
    }
    if count == 0 {
        return Err(data_err!("no valid truth values in the accuracy scope"));
    }
    Ok(100.0 * (1.0 - sum / count as f64))
}

/// Accuracy over every coordinate.
pub fn accuracy_all(truth: &[f64], pred: &[f64]) -> Result<f64> {
    let scope: Vec<usize> = (0..truth.len()).collect();
    accuracy(truth, pred, &scope)
}

/// A model answering one input→output task.
pub trait TaskPredictor: Sync {
    fn name(&self) -> &str;

    /// `x_imputed` is the full feature vector with every feature of `given`
    /// (which includes all task outputs) replaced by its mean. Returns one
    /// value per task output. `stream` keys any internal randomness.
    fn predict(&self, x_imputed: &[f64], given: &Mask, stream: u64) -> Result<Vec<f64>>;
}

/// Single forward pass of the autoencoder.
pub struct MaePredictor<'a> {
    pub name: String,
    pub model: &'a MlpModel,
    pub task: &'a TaskIndices,
}

impl TaskPredictor for MaePredictor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &[f64], _given: &Mask, _stream: u64) -> Result<Vec<f64>> {
        Ok(self.task.gather_outputs(&self.model.forward(x)?))
    }
}

/// Implicit ensemble over the autoencoder.
///
/// When the given mask already exceeds a fixed-fraction target (heavy input
/// masking in a sweep), every superset would equal the given mask, so the
/// prediction degenerates to a single forward pass instead of an error.
pub struct EnsemblePredictor<'a> {
    pub name: String,
    pub model: &'a MlpModel,
    pub task: &'a TaskIndices,
    pub cfg: EnsembleConfig,
    pub means: &'a FeatureMeans,
    pub partition: &'a LayerPartition,
}

impl TaskPredictor for EnsemblePredictor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &[f64], given: &Mask, stream: u64) -> Result<Vec<f64>> {
        if let MaskKind::FixedFraction { p } = self.cfg.policy.kind() {
            if target_size(p, x.len()) <= given.len() {
                return Ok(self.task.gather_outputs(&self.model.forward(x)?));
            }
        }
        let p = ensemble_predict(self.model, x, given, self.means, self.partition, &self.cfg, stream)?;
        Ok(self.task.gather_outputs(&p))
    }
}

/// Task network reading only the input features.
pub struct TaskMlpPredictor<'a> {
    pub name: String,
    pub model: &'a MlpModel,
    pub task: &'a TaskIndices,
}

impl TaskPredictor for TaskMlpPredictor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &[f64], _given: &Mask, _stream: u64) -> Result<Vec<f64>> {
        self.model.forward(&self.task.gather_inputs(x))
    }
}

pub struct LinearPredictor<'a> {
    pub name: String,
    pub model: &'a LinearModel,
    pub task: &'a TaskIndices,
}

impl TaskPredictor for LinearPredictor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, x: &[f64], _given: &Mask, _stream: u64) -> Result<Vec<f64>> {
        Ok(self.model.predict(&self.task.gather_inputs(x)))
    }
}

/// Always emits the same outputs (e.g. the feature means).
pub struct ConstantPredictor {
    pub name: String,
    pub values: Vec<f64>,
}

impl TaskPredictor for ConstantPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, _x: &[f64], _given: &Mask, _stream: u64) -> Result<Vec<f64>> {
        Ok(self.values.clone())
    }
}

/// Mask with the task outputs, the given input indices and missing values.
fn given_mask(row: &[f64], task: &TaskIndices, masked_inputs: impl Iterator<Item = usize>) -> Mask {
    Mask::from_indices(task.outputs.iter().copied().chain(masked_inputs)).union(&missing_mask(row))
}

fn row_accuracy(row: &[f64], pred: &[f64], task: &TaskIndices) -> Result<f64> {
    let truth = task.gather_outputs(row);
    accuracy_all(&truth, pred)
}

/// Accuracy of `predictor` on every row with all inputs given.
pub fn per_row_accuracy(
    predictor: &dyn TaskPredictor,
    rows: &[&[f64]],
    task: &TaskIndices,
    means: &FeatureMeans,
    seed: u64,
) -> Result<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let given = given_mask(row, task, core::iter::empty());
            let x = apply_mask(row, &given, means)?;
            let stream = rng::derive_seed(seed, &[rng::hash_str(predictor.name()), i as u64]);
            row_accuracy(row, &predictor.predict(&x, &given, stream)?, task)
        })
        .collect()
}

/// Mean accuracy with all inputs given.
pub fn mean_accuracy(
    predictor: &dyn TaskPredictor,
    rows: &[&[f64]],
    task: &TaskIndices,
    means: &FeatureMeans,
    seed: u64,
) -> Result<f64> {
    let acc = per_row_accuracy(predictor, rows, task, means, seed)?;
    Ok(acc.iter().sum::<f64>() / acc.len().max(1) as f64)
}

/// Per-observation accuracy over chronologically ordered rows and its trend.
pub fn accuracy_trend_for(
    predictor: &dyn TaskPredictor,
    rows: &[&[f64]],
    task: &TaskIndices,
    means: &FeatureMeans,
    seed: u64,
) -> Result<TrendReport> {
    accuracy_trend(per_row_accuracy(predictor, rows, task, means, seed)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Input-masking fractions, strictly increasing within `[0, 0.95]`.
    pub fractions: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.trials == 0 {
            return Err(config_err!("sweep needs at least one fraction and one trial"));
        }
        if self.fractions.iter().any(|f| !(0.0..=0.95).contains(f)) {
            return Err(config_err!("sweep fractions must lie in [0, 0.95]"));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("sweep fractions must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub fraction: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: usize,
}

/// Accuracy of every model as a growing share of the input features is
/// masked. Input masks depend only on `(seed, fraction, trial, row)`, so all
/// models see the same masks; each model's internal randomness is keyed by
/// its name as well. Output features are never part of the sweep mask.
pub fn masking_sweep(
    cfg: &SweepConfig,
    models: &[&dyn TaskPredictor],
    rows: &[&[f64]],
    task: &TaskIndices,
    means: &FeatureMeans,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(data_err!("sweep needs at least one row"));
    }
    let mut table = Vec::with_capacity(cfg.fractions.len() * models.len());
    let n_in = task.inputs.len();
    for &fraction in &cfg.fractions {
        let fkey = fraction.to_bits();
        let size = target_size(fraction, n_in);
        let mut per_model: Vec<Vec<f64>> = (0..models.len()).map(|_| Vec::with_capacity(cfg.trials)).collect();
        for trial in 0..cfg.trials {
            let mut sums = alloc::vec![0.0; models.len()];
            for (i, row) in rows.iter().enumerate() {
                let mut r = rng::derived(cfg.seed, &[fkey, trial as u64, i as u64]);
                let picked = index::sample(&mut r, n_in, size);
                let given = given_mask(row, task, picked.into_iter().map(|p| task.inputs[p]));
                let x = apply_mask(row, &given, means)?;
                for (m, model) in models.iter().enumerate() {
                    let stream = rng::derive_seed(
                        cfg.seed ^ rng::hash_str(model.name()),
                        &[fkey, trial as u64, i as u64],
                    );
                    sums[m] += row_accuracy(row, &model.predict(&x, &given, stream)?, task)?;
                }
            }
            for (m, s) in sums.into_iter().enumerate() {
                per_model[m].push(s / rows.len() as f64);
            }
        }
        for (model, accs) in models.iter().zip(per_model) {
            let (mean, std) = mean_std(&accs);
            table.push(SweepRow { model: String::from(model.name()), fraction, mean_acc: mean, std_acc: std, trials: cfg.trials });
        }
    }
    Ok(table)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, libm::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng as _;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_all(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 100.0);
        assert_eq!(accuracy_all(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(accuracy(&[0.0], &[0.0], &[]).is_err());
        assert_eq!(accuracy(&[f64::NAN, 1.0], &[5.0, 1.0], &[0, 1]).unwrap(), 100.0);
    }

    #[test]
    fn mean_prediction_on_standard_normal_is_not_zero() {
        // Monte-Carlo E|Z| oracle: Box-Muller draws
        let mut r = rng::seeded(12);
        let k = 200_000;
        let mut truth = Vec::with_capacity(k);
        for _ in 0..k {
            let u1: f64 = r.gen_range(f64::EPSILON..1.0);
            let u2: f64 = r.gen();
            truth.push(libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2));
        }
        let acc = accuracy_all(&truth, &vec![0.0; k]).unwrap();
        let expected = 100.0 * (1.0 - libm::sqrt(2.0 / core::f64::consts::PI));
        assert!((acc - expected).abs() < 0.5, "{acc} vs {expected}");
        assert!((expected - 20.2).abs() < 0.05);
    }

    #[test]
    fn accuracy_is_affine_in_errors() {
        let truth = [0.1, -0.4, 0.9];
        let pred = [0.3, -0.1, 0.5];
        let scaled: Vec<f64> = truth.iter().zip(&pred).map(|(t, p)| t + 2.5 * (p - t)).collect();
        let a = 100.0 - accuracy_all(&truth, &pred).unwrap();
        let b = 100.0 - accuracy_all(&truth, &scaled).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12);
    }

    #[test]
    fn sweep_config_validation() {
        let ok = SweepConfig { fractions: vec![0.0, 0.5, 0.95], trials: 2, seed: 0 };
        assert!(ok.validate().is_ok());
        assert!(SweepConfig { fractions: vec![0.5, 0.5], ..ok.clone() }.validate().is_err());
        assert!(SweepConfig { fractions: vec![0.0, 0.96], ..ok.clone() }.validate().is_err());
        assert!(SweepConfig { trials: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn constant_model_sweep_is_flat() {
        let task = TaskIndices { inputs: vec![0, 1, 2], outputs: vec![3] };
        let means = FeatureMeans { means: vec![0.0; 4], source: "t".into() };
        let rows_owned: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0, 2.0, 0.5]).collect();
        let rows: Vec<&[f64]> = rows_owned.iter().map(Vec::as_slice).collect();
        let c = ConstantPredictor { name: "const".into(), values: vec![0.25] };
        let cfg = SweepConfig { fractions: vec![0.0, 0.3, 0.9], trials: 3, seed: 1 };
        let table = masking_sweep(&cfg, &[&c], &rows, &task, &means).unwrap();
        assert_eq!(table.len(), 3);
        for r in &table {
            assert!((r.mean_acc - 75.0).abs() < 1e-12);
            assert_eq!(r.std_acc, 0.0);
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - core::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
