//! Resolved command configurations and their execution.
//!
//! Every command is first turned into a fully resolved [`RunConfig`]: input
//! paths made absolute, every default filled in and every seed fixed. The
//! run config is written to `run.json` in the output directory and is the
//! only input of [`execute`], so `mrmae replay run.json` repeats a run
//! byte for byte.

use std::path::{Path, PathBuf};

use mrmae_core::baselines::{fit_linear, select_lasso_penalty, task_rows, width_for_budget, LinearModel, TaskIndices};
use mrmae_core::dataset::{FeatureMeans, LayerPartition, LayeredDataset, Split, Timestamp};
use mrmae_core::ensemble::{ensemble_run, MeanAggregator};
use mrmae_core::evaluate::{
    masking_sweep, mean_accuracy, per_row_accuracy, ConstantPredictor, EnsemblePredictor, LinearPredictor,
    MaePredictor, SweepConfig, SweepRow, TaskMlpPredictor, TaskPredictor,
};
use mrmae_core::importance::{accumulate_shard, ImportanceMode, LossMatrix};
use mrmae_core::masking::{apply_mask, missing_mask, target_size, Mask, MaskKind};
use mrmae_core::nnet::{parameter_count, MlpModel};
use mrmae_core::rng::{self, RNG_IDENTITY};
use mrmae_core::semisup::{
    pseudo_label_row, train_student, Provenance, PseudoLabeledDataset, PseudoRow, Student, StudentConfig,
    StudentKind,
};
use mrmae_core::shift::{
    linear_trend, pca_top, select_patches, slope_permutation_p, variability_map, yearly_points_for_feature,
    Alternative, VariabilityMap,
};
use mrmae_core::training::{init_model, train_autoencoder, train_supervised, EpochLog, TrainSet};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_activation, EnsembleSpec, FitSpec, PolicySpec, TaskFileSpec};
use crate::error::{IoError, Result};
use crate::formats::{
    fmt_timestamp, fmt_value, load_dataset, loss_matrix_bytes, read_checkpoint, read_grid, write_atomic,
    write_checkpoint, write_csv, write_dataset_csv, write_grid, write_json, LoadedModel, ManifestFile, ModelKind,
    Sidecar, SidecarTask, VERSION,
};
use crate::synth::{generate, SyntheticSpec};

pub const DEFAULT_SEED: u64 = 42;

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub rng: String,
    pub workers: usize,
    pub command: Command,
}

impl RunConfig {
    pub fn new(workers: usize, command: Command) -> Self {
        RunConfig { version: VERSION.into(), rng: RNG_IDENTITY.into(), workers: workers.max(1), command }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    Synth(SynthRun),
    Train(TrainRun),
    Predict(PredictRun),
    Ensemble(EnsembleRun),
    Importance(ImportanceRun),
    Shift(ShiftRun),
    SelectPatches(SelectRun),
    PseudoLabel(PseudoRun),
    Evaluate(EvaluateRun),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Ensemble(_) => "ensemble",
            Command::Importance(_) => "importance",
            Command::Shift(_) => "shift",
            Command::SelectPatches(_) => "select-patches",
            Command::PseudoLabel(_) => "pseudo-label",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

/// Writes `run.json` and runs the command; outputs go to `out` only.
pub fn execute(run: &RunConfig, out: &Path) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers.max(1))
        .build()
        .map_err(|e| IoError::Config(format!("cannot start {} workers: {e}", run.workers)))?;
    write_json(&out.join("run.json"), run)?;
    log::info!("running {} into {}", run.command.name(), out.display());
    pool.install(|| match &run.command {
        Command::Synth(c) => run_synth(c, out),
        Command::Train(c) => run_train(c, out),
        Command::Predict(c) => run_predict(c, None, out),
        Command::Ensemble(c) => run_predict(&c.inputs, Some(c), out),
        Command::Importance(c) => run_importance(c, out),
        Command::Shift(c) => run_shift(c, out),
        Command::SelectPatches(c) => run_select(c, out),
        Command::PseudoLabel(c) => run_pseudo(c, out),
        Command::Evaluate(c) => run_evaluate(c, out),
    })
}

/// Absolute form of an input path (it must exist).
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    pub spec: SyntheticSpec,
}

fn run_synth(c: &SynthRun, out: &Path) -> Result<()> {
    let data = generate(&c.spec)?;
    let manifest = ManifestFile::from_manifest(&data.manifest);
    for (t, &ts) in data.manifest.timestamps.iter().enumerate() {
        for (li, layer) in data.manifest.layers.iter().enumerate() {
            if let Some(grid) = data.grid(t, li) {
                write_atomic(&out.join(manifest.grid_name(&layer.name, ts)), &crate::formats::grid_bytes(grid))?;
            }
        }
    }
    write_json(&out.join("ground_truth.json"), &data.truth)?;
    write_json(&out.join("manifest.json"), &manifest)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Manifest of the gridded dataset.
    pub data: PathBuf,
    /// Number of trailing timestamps held out as the test split.
    #[serde(default)]
    pub test_count: usize,
    #[serde(default = "default_kind")]
    pub model: ModelKind,
    /// Required for task models.
    #[serde(default)]
    pub task: Option<TaskFileSpec>,
    /// Masking policy of the autoencoder.
    #[serde(default = "default_policy")]
    pub policy: PolicySpec,
    #[serde(default)]
    pub fit: FitSpec,
    /// Parameter budget of a task MLP; defaults to the autoencoder built from
    /// the same architecture settings.
    #[serde(default)]
    pub param_budget: Option<usize>,
    /// Lasso penalty; when absent it is chosen on a validation split.
    #[serde(default)]
    pub lasso_penalty: Option<f64>,
    #[serde(default = "default_lasso_grid")]
    pub lasso_grid: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_kind() -> ModelKind {
    ModelKind::Mae
}

fn default_policy() -> PolicySpec {
    PolicySpec::FixedFraction { p: 0.7, seed: None }
}

pub fn default_lasso_grid() -> Vec<f64> {
    vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3]
}

impl TrainRun {
    /// Fills in defaults and absolute paths.
    pub fn resolve(mut self, seed: Option<u64>, base: &Path) -> Result<Self> {
        let seed = self.seed.or(seed).unwrap_or(DEFAULT_SEED);
        self.seed = Some(seed);
        self.policy = self.policy.resolved(seed)?;
        self.data = absolute(&base.join(&self.data))?;
        if self.model != ModelKind::Mae && self.task.is_none() {
            return Err(IoError::Config(format!("{} models need a \"task\" with output layers", self.model.name())));
        }
        if self.model == ModelKind::Lasso && self.lasso_penalty.is_none() && self.lasso_grid.is_empty() {
            return Err(IoError::Config("lasso needs a penalty or a non-empty lasso_grid".into()));
        }
        Ok(self)
    }
}

fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "mean_loss", "masked_loss", "unmasked_loss"],
        log.iter().map(|e| {
            vec![e.epoch.to_string(), fmt_value(e.mean_loss), fmt_value(e.masked_loss), fmt_value(e.unmasked_loss)]
        }),
    )
}

fn sidecar_task(task_spec: &mrmae_core::baselines::TaskSpec, task: &TaskIndices) -> SidecarTask {
    SidecarTask {
        inputs: task_spec.input_layers.clone(),
        outputs: task_spec.output_layers.clone(),
        input_indices: task.inputs.clone(),
        output_indices: task.outputs.clone(),
    }
}

fn run_train(c: &TrainRun, out: &Path) -> Result<()> {
    let seed = c.seed.unwrap_or(DEFAULT_SEED);
    let ds = load_dataset(&c.data, c.test_count)?.normalize_layers()?;
    let stats = ds.norm_stats().expect("normalized").to_vec();
    let means = ds.compute_feature_means()?;
    let partition = ds.partition().clone();
    let n = ds.n_features();
    let ckpt = out.join("model.ckpt");
    match c.model {
        ModelKind::Mae => {
            let cfg = c.fit.train_config(c.policy.build(seed)?, seed)?;
            let idx = ds.indices(Split::Train);
            let set = TrainSet::new(idx.iter().map(|&i| ds.row(i)).collect());
            let model = init_model(n, n, &cfg.architecture, seed)?;
            let outcome = train_autoencoder(model, &set, &means, &partition, &cfg)?;
            write_training_log(&out.join("training_log.csv"), &outcome.log)?;
            let sidecar = Sidecar::new(ModelKind::Mae, &outcome.model, seed, &stats, &means.means, &partition);
            write_checkpoint(&ckpt, &outcome.model, &sidecar)
        }
        kind => {
            let spec = c.task.as_ref().expect("resolved").build(&partition);
            let task = spec.resolve(&partition)?;
            let (xs, ys) = task_rows(&ds, &task, Split::Train);
            if xs.is_empty() {
                return Err(IoError::Config("no complete training rows for the task".into()));
            }
            let (model, penalty) = match kind {
                ModelKind::TaskMlp => {
                    let arch = c.fit.architecture.build()?;
                    let budget = c.param_budget.unwrap_or_else(|| parameter_count(&arch.dims(n, n)));
                    let h = width_for_budget(task.inputs.len(), task.outputs.len(), budget)?;
                    let mlp_arch =
                        mrmae_core::training::Architecture { hidden: Some(vec![h, h]), activation: arch.activation };
                    let model = init_model(task.inputs.len(), task.outputs.len(), &mlp_arch, seed)?;
                    let scfg = c.fit.supervised_config(seed)?;
                    let outcome = train_supervised(model, &xs, &ys, None, None, &scfg)?;
                    write_training_log(&out.join("training_log.csv"), &outcome.log)?;
                    log::info!("task MLP width {h}: {} parameters for budget {budget}", outcome.model.parameter_count());
                    (outcome.model, None)
                }
                ModelKind::Linear => (fit_linear(&xs, &ys, 0.0)?.to_mlp(), None),
                ModelKind::Lasso => {
                    let penalty = match c.lasso_penalty {
                        Some(p) => p,
                        None => {
                            let cut = xs.len() - (xs.len() / 5).max(1).min(xs.len() - 1);
                            if cut == 0 {
                                return Err(IoError::Config("too few rows to select a lasso penalty".into()));
                            }
                            let (best, scores) =
                                select_lasso_penalty(&xs[..cut], &ys[..cut], &xs[cut..], &ys[cut..], &c.lasso_grid)?;
                            write_csv(
                                &out.join("lasso_selection.csv"),
                                &["penalty", "validation_l1"],
                                scores.iter().map(|(p, e)| vec![fmt_value(*p), fmt_value(*e)]),
                            )?;
                            let skipped = scores.iter().filter(|s| s.1.is_nan()).count();
                            if skipped > 0 {
                                log::warn!("{skipped} lasso penalties did not converge and were skipped");
                            }
                            log::info!("lasso penalty {best} selected on {} validation rows", xs.len() - cut);
                            best
                        }
                    };
                    (fit_linear(&xs, &ys, penalty)?.to_mlp(), Some(penalty))
                }
                ModelKind::Mae => unreachable!(),
            };
            let mut sidecar = Sidecar::new(kind, &model, seed, &stats, &means.means, &partition);
            sidecar.task = Some(sidecar_task(&spec, &task));
            sidecar.l1_penalty = penalty;
            write_checkpoint(&ckpt, &model, &sidecar)
        }
    }
}

// ---------------------------------------------------------------------------
// Loaded models as predictors

/// A checkpoint bound to a dataset layout.
pub struct Bound {
    pub loaded: LoadedModel,
    pub partition: LayerPartition,
    pub means: FeatureMeans,
    pub linear: Option<LinearModel>,
    pub task: Option<TaskIndices>,
}

impl Bound {
    pub fn load(path: &Path) -> Result<Bound> {
        let loaded = read_checkpoint(path)?;
        let partition = loaded.sidecar.partition();
        if loaded.sidecar.feature_means.len() != partition.n_features() {
            return Err(IoError::format(path, "sidecar feature means do not match its layers"));
        }
        let means = FeatureMeans { means: loaded.sidecar.feature_means.clone(), source: "train-split".into() };
        let linear = match loaded.sidecar.kind {
            ModelKind::Linear | ModelKind::Lasso => {
                Some(LinearModel::from_mlp(&loaded.model, loaded.sidecar.l1_penalty.unwrap_or(0.0))?)
            }
            _ => None,
        };
        let task = loaded
            .sidecar
            .task
            .as_ref()
            .map(|t| TaskIndices { inputs: t.input_indices.clone(), outputs: t.output_indices.clone() });
        Ok(Bound { loaded, partition, means, linear, task })
    }

    /// Loads `data` normalized with the model's statistics.
    pub fn dataset(&self, data: &Path, test_count: usize) -> Result<LayeredDataset> {
        let raw = load_dataset(data, test_count)?;
        if raw.partition() != &self.partition {
            return Err(IoError::Config(format!(
                "{} does not have the layer layout the model was trained on",
                data.display()
            )));
        }
        Ok(raw.apply_norm(&self.loaded.sidecar.norm_stats()))
    }

    pub fn kind(&self) -> ModelKind {
        self.loaded.sidecar.kind
    }

    fn require_mae(&self, what: &str) -> Result<()> {
        if self.kind() != ModelKind::Mae {
            return Err(IoError::Config(format!("{what} needs an autoencoder checkpoint, got {}", self.kind().name())));
        }
        Ok(())
    }

    /// Predictor for `task`; task models must have been trained on it.
    pub fn predictor<'a>(
        &'a self,
        name: &str,
        task: &'a TaskIndices,
        ensemble: Option<&EnsembleSpec>,
    ) -> Result<Box<dyn TaskPredictor + 'a>> {
        if self.kind() != ModelKind::Mae && self.task.as_ref() != Some(task) {
            return Err(IoError::Config(format!("model {name} was trained for a different task")));
        }
        Ok(match (self.kind(), ensemble) {
            (ModelKind::Mae, None) => Box::new(MaePredictor { name: name.into(), model: &self.loaded.model, task }),
            (ModelKind::Mae, Some(e)) => Box::new(EnsemblePredictor {
                name: name.into(),
                model: &self.loaded.model,
                task,
                cfg: e.build()?,
                means: &self.means,
                partition: &self.partition,
            }),
            (_, Some(_)) => return Err(IoError::Config(format!("model {name}: ensembles need an autoencoder"))),
            (ModelKind::TaskMlp, None) => {
                Box::new(TaskMlpPredictor { name: name.into(), model: &self.loaded.model, task })
            }
            (ModelKind::Linear | ModelKind::Lasso, None) => {
                Box::new(LinearPredictor { name: name.into(), model: self.linear.as_ref().unwrap(), task })
            }
        })
    }
}

// ---------------------------------------------------------------------------
// predict / ensemble

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl SplitChoice {
    pub fn rows(self, ds: &LayeredDataset) -> Vec<usize> {
        match self {
            SplitChoice::Train => ds.indices(Split::Train),
            SplitChoice::Test => ds.indices(Split::Test),
            SplitChoice::All => (0..ds.n_observations()).collect(),
        }
    }
}

/// Which features are hidden from the model: whole layers plus a random
/// share of the remaining features, plus every missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default)]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    fn base(&self, partition: &LayerPartition) -> Result<Vec<usize>> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(IoError::Config(format!("mask fraction {} outside [0, 1)", self.fraction)));
        }
        Ok(partition.indices_of(&self.layers)?)
    }

    /// Mask of observation `row` (index `i` in the dataset).
    pub fn mask_for(&self, base: &[usize], row: &[f64], i: usize) -> Mask {
        let mut m = Mask::from_indices(base.iter().copied()).union(&missing_mask(row));
        if self.fraction > 0.0 {
            let free = m.complement(row.len());
            let size = target_size(self.fraction, free.len());
            let mut r = rng::derived(self.seed, &[i as u64]);
            m = m.union(&Mask::from_indices(index::sample(&mut r, free.len(), size).into_iter().map(|p| free[p])));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRun {
    pub model: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default = "default_split")]
    pub split: SplitChoice,
    #[serde(default)]
    pub mask: MaskSpec,
}

fn default_split() -> SplitChoice {
    SplitChoice::All
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { layers: Vec::new(), fraction: 0.0, seed: 0 }
    }
}

impl PredictRun {
    pub fn resolve(mut self, seed: Option<u64>, base: &Path) -> Result<Self> {
        self.model = absolute(&base.join(&self.model))?;
        self.data = absolute(&base.join(&self.data))?;
        if let Some(s) = seed {
            self.mask.seed = s;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleRun {
    #[serde(flatten)]
    pub inputs: PredictRun,
    pub ensemble: EnsembleSpec,
    /// File name (inside the output directory) for per-member predictions.
    #[serde(default)]
    pub dump_members: Option<String>,
}

/// Accuracy summary written by `predict` and `ensemble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub rows: usize,
    pub scored_values: usize,
    /// `100 · (1 − mean |pred − truth|)` over masked, observed values.
    pub accuracy: Option<f64>,
    /// The same metric for predicting the training-split feature means.
    pub mean_baseline_accuracy: Option<f64>,
}

struct RowPrediction {
    /// `(feature, value)` for every predicted feature.
    values: Vec<(usize, f64)>,
    members: Vec<(Vec<f64>, Mask)>,
}

fn run_predict(c: &PredictRun, ens: Option<&EnsembleRun>, out: &Path) -> Result<()> {
    let bound = Bound::load(&c.model)?;
    let ds = bound.dataset(&c.data, c.test_count)?;
    let base = c.mask.base(&bound.partition)?;
    let ecfg = match ens {
        Some(e) => {
            bound.require_mae("ensemble")?;
            Some(e.ensemble.build()?)
        }
        None => None,
    };
    if let Some(task) = &bound.task {
        if task.outputs.iter().any(|j| !base.contains(j)) {
            return Err(IoError::Config("mask layers must include every output layer of a task model".into()));
        }
    }
    let indices = c.split.rows(&ds);
    let keep_members = ens.is_some_and(|e| e.dump_members.is_some());
    let predictions: Vec<RowPrediction> = indices
        .par_iter()
        .map(|&i| -> Result<RowPrediction> {
            let row = ds.row(i);
            let mask = c.mask.mask_for(&base, row, i);
            let x = apply_mask(row, &mask, &bound.means)?;
            let (full, members) = match (&bound.task, &ecfg) {
                (Some(task), _) => {
                    let p = match &bound.linear {
                        Some(lin) => lin.predict(&task.gather_inputs(&x)),
                        None => bound.loaded.model.forward(&task.gather_inputs(&x))?,
                    };
                    return Ok(RowPrediction { values: task.outputs.iter().copied().zip(p).collect(), members: vec![] });
                }
                // The given mask already reaches the ensemble size: every
                // member would see the same input.
                (None, Some(cfg)) if ensemble_target(cfg, x.len()) <= mask.len() => {
                    let p = bound.loaded.model.forward(&x)?;
                    let members = if keep_members { vec![(p.clone(), mask.clone())] } else { vec![] };
                    (p, members)
                }
                (None, Some(cfg)) => {
                    let r = ensemble_run(&bound.loaded.model, &x, &mask, &bound.means, &bound.partition, cfg, i as u64, &MeanAggregator)?;
                    let members = if keep_members { r.members.into_iter().zip(r.masks).collect() } else { vec![] };
                    (r.prediction, members)
                }
                (None, None) => (bound.loaded.model.forward(&x)?, vec![]),
            };
            Ok(RowPrediction { values: mask.iter().map(|j| (j, full[j])).collect(), members })
        })
        .collect::<Result<_>>()?;

    let timestamps = ds.timestamps();
    let mut lines = Vec::new();
    let (mut err, mut base_err, mut count) = (0.0, 0.0, 0usize);
    for (&i, p) in indices.iter().zip(&predictions) {
        for &(j, v) in &p.values {
            let truth = ds.row(i)[j];
            if !truth.is_nan() {
                err += (v - truth).abs();
                base_err += (bound.means.means[j] - truth).abs();
                count += 1;
            }
            lines.push(feature_line(&bound.partition, timestamps[i], j, v));
        }
    }
    write_csv(&out.join("predictions.csv"), &crate::formats::DATASET_HEADER, lines)?;
    if let Some(name) = ens.and_then(|e| e.dump_members.as_deref()) {
        let mut rows = Vec::new();
        for (&i, p) in indices.iter().zip(&predictions) {
            for (it, (q, m)) in p.members.iter().enumerate() {
                for (j, v) in q.iter().enumerate() {
                    rows.push(vec![
                        i.to_string(),
                        it.to_string(),
                        j.to_string(),
                        u8::from(m.contains(j)).to_string(),
                        fmt_value(*v),
                    ]);
                }
            }
        }
        write_csv(&out_file(out, name)?, &["row", "iteration", "feature", "masked", "value"], rows)?;
    }
    let acc = |e: f64| (count > 0).then(|| 100.0 * (1.0 - e / count as f64));
    let summary = PredictionSummary {
        rows: indices.len(),
        scored_values: count,
        accuracy: acc(err),
        mean_baseline_accuracy: acc(base_err),
    };
    if let (Some(a), Some(b)) = (summary.accuracy, summary.mean_baseline_accuracy) {
        log::info!("accuracy {a:.3} (mean baseline {b:.3}) over {count} values");
    }
    write_json(&out.join("accuracy.json"), &summary)
}

fn ensemble_target(cfg: &mrmae_core::ensemble::EnsembleConfig, n: usize) -> usize {
    match cfg.policy.kind() {
        MaskKind::FixedFraction { p } => target_size(p, n),
        _ => 0,
    }
}

fn feature_line(partition: &LayerPartition, t: Timestamp, j: usize, v: f64) -> Vec<String> {
    let c = partition.coord(j).expect("feature in range");
    vec![
        fmt_timestamp(t),
        partition.layers()[c.layer].name.clone(),
        c.row.to_string(),
        c.col.to_string(),
        fmt_value(v),
    ]
}

/// A plain file name inside the output directory.
fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    let p = Path::new(name);
    match p.file_name() {
        Some(f) if p.components().count() == 1 => Ok(out.join(f)),
        _ => Err(IoError::Config(format!("{name:?} must be a plain file name (it is written inside --out)"))),
    }
}

// ---------------------------------------------------------------------------
// importance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceRun {
    pub model: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default = "default_importance_split")]
    pub split: SplitChoice,
    pub policy: PolicySpec,
    pub iterations: usize,
    /// `global`, `layer:<name>` or `feature:<index>`.
    pub mode: String,
    #[serde(default = "default_base")]
    pub loss: String,
}

fn default_importance_split() -> SplitChoice {
    SplitChoice::Train
}

fn default_base() -> String {
    "l1".into()
}

pub fn parse_mode(s: &str) -> Result<ImportanceMode> {
    match s.split_once(':') {
        None if s == "global" => Ok(ImportanceMode::Global),
        Some(("layer", name)) if !name.is_empty() => Ok(ImportanceMode::Layer(name.into())),
        Some(("feature", idx)) => idx
            .parse()
            .map(ImportanceMode::Feature)
            .map_err(|_| IoError::Config(format!("bad feature index in mode {s:?}"))),
        _ => Err(IoError::Config(format!("unknown importance mode {s:?} (global, layer:NAME, feature:INDEX)"))),
    }
}

impl ImportanceRun {
    pub fn resolve(mut self, seed: Option<u64>, base: &Path) -> Result<Self> {
        self.model = absolute(&base.join(&self.model))?;
        self.data = absolute(&base.join(&self.data))?;
        self.policy = self.policy.resolved(seed.unwrap_or(DEFAULT_SEED))?;
        parse_mode(&self.mode)?;
        if self.iterations == 0 {
            return Err(IoError::Config("importance needs at least one iteration".into()));
        }
        Ok(self)
    }
}

fn run_importance(c: &ImportanceRun, out: &Path) -> Result<()> {
    let bound = Bound::load(&c.model)?;
    bound.require_mae("importance")?;
    let ds = bound.dataset(&c.data, c.test_count)?;
    let policy = c.policy.build(DEFAULT_SEED)?;
    let base = crate::config::LossSpec { base: c.loss.clone(), ..Default::default() }.build()?.base;
    let mode = parse_mode(&c.mode)?;
    let rows: Vec<&[f64]> = c.split.rows(&ds).into_iter().map(|i| ds.row(i)).collect();
    // One shard per pass, merged in pass order: the result does not depend
    // on the number of workers.
    let shards: Vec<LossMatrix> = (0..c.iterations)
        .into_par_iter()
        .map(|pass| {
            accumulate_shard(&bound.loaded.model, &rows, &bound.means, &bound.partition, &policy, pass..pass + 1, base, policy.seed())
        })
        .collect::<mrmae_core::Result<_>>()?;
    let mut matrix = LossMatrix::new(bound.partition.n_features());
    for s in &shards {
        matrix.merge(s)?;
    }
    write_atomic(&out.join("loss_matrix.bin"), &loss_matrix_bytes(&matrix))?;
    let report = matrix.summarize(&mode, &bound.partition)?;
    write_csv(
        &out.join("importance.csv"),
        &["feature_index", "layer", "patch_row", "patch_col", "importance"],
        (0..matrix.n()).map(|j| {
            let co = bound.partition.coord(j).expect("in range");
            vec![
                j.to_string(),
                bound.partition.layers()[co.layer].name.clone(),
                co.row.to_string(),
                co.col.to_string(),
                report.importance[j].map(fmt_value).unwrap_or_default(),
            ]
        }),
    )?;
    for (name, _, _, grid) in report.to_maps(&bound.partition) {
        write_grid(&out.join(format!("importance_{name}.f32")), &grid)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shift / select-patches

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftRun {
    pub data: PathBuf,
    /// Timestamps excluded from the normalization statistics.
    #[serde(default)]
    pub test_count: usize,
    /// Layers to analyse; empty means all.
    #[serde(default)]
    pub layers: Vec<String>,
}

impl ShiftRun {
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        self.data = absolute(&base.join(&self.data))?;
        Ok(self)
    }
}

fn selected_lines(name: &str, map: &VariabilityMap, picked: &[(usize, usize)]) -> Vec<Vec<String>> {
    picked
        .iter()
        .map(|&(r, c)| vec![name.to_string(), r.to_string(), c.to_string(), fmt_value(map.get(r, c))])
        .collect()
}

const SELECTED_HEADER: [&str; 4] = ["layer", "row", "col", "lambda1"];

fn run_shift(c: &ShiftRun, out: &Path) -> Result<()> {
    let ds = load_dataset(&c.data, c.test_count)?.normalize_layers()?;
    let partition = ds.partition().clone();
    let layers: Vec<usize> = if c.layers.is_empty() {
        (0..partition.len()).collect()
    } else {
        c.layers
            .iter()
            .map(|l| partition.index_of(l).ok_or_else(|| IoError::Config(format!("unknown layer {l}"))))
            .collect::<Result<_>>()?
    };
    let maps: Vec<VariabilityMap> =
        layers.par_iter().map(|&l| variability_map(&ds, l)).collect::<mrmae_core::Result<_>>()?;
    let mut lines = Vec::new();
    for (&l, map) in layers.iter().zip(&maps) {
        let info = &partition.layers()[l];
        write_grid(&out.join(format!("variability_{}.f32", info.name)), &map.lambda1)?;
        let picked = select_patches(map);
        for &(r, col) in &picked {
            let f = info.start + r * info.patch_cols + col;
            let points = yearly_points_for_feature(&ds, f)?;
            let pca = pca_top(&points.points)?;
            write_csv(
                &out.join(format!("pca_{}_{r}_{col}.csv", info.name)),
                &["year", "u", "v"],
                points.years.iter().zip(&pca.projections).map(|(y, p)| vec![y.to_string(), fmt_value(p.0), fmt_value(p.1)]),
            )?;
        }
        lines.extend(selected_lines(&info.name, map, &picked));
    }
    write_csv(&out.join("selected_patches.csv"), &SELECTED_HEADER, lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectRun {
    pub map: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub layer: String,
}

fn run_select(c: &SelectRun, out: &Path) -> Result<()> {
    let lambda1 = read_grid(&c.map, c.rows, c.cols)?
        .ok_or_else(|| IoError::Config(format!("map {} does not exist", c.map.display())))?;
    let map = VariabilityMap { rows: c.rows, cols: c.cols, lambda1 };
    let picked = select_patches(&map);
    write_csv(&out.join("selected_patches.csv"), &SELECTED_HEADER, selected_lines(&c.layer, &map, &picked))
}

// ---------------------------------------------------------------------------
// pseudo-label

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentRun {
    pub kind: String,
    pub task: TaskFileSpec,
    #[serde(default)]
    pub fit: FitSpec,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    #[serde(default)]
    pub param_budget: Option<usize>,
    #[serde(default)]
    pub lasso_penalty: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoRun {
    pub teacher: PathBuf,
    /// Manifest whose missing values are filled in.
    pub unlabeled: PathBuf,
    /// Optional labeled manifest whose training rows lead the output.
    #[serde(default)]
    pub labeled: Option<PathBuf>,
    #[serde(default)]
    pub labeled_test_count: usize,
    pub ensemble: EnsembleSpec,
    #[serde(default = "one")]
    pub pseudo_weight: f64,
    #[serde(default)]
    pub student: Option<StudentRun>,
}

fn one() -> f64 {
    1.0
}

impl PseudoRun {
    pub fn resolve(mut self, base: &Path) -> Result<Self> {
        self.teacher = absolute(&base.join(&self.teacher))?;
        self.unlabeled = absolute(&base.join(&self.unlabeled))?;
        if let Some(l) = &self.labeled {
            self.labeled = Some(absolute(&base.join(l))?);
        }
        if let Some(s) = &mut self.student {
            if StudentKind::from_name(&s.kind).is_none() {
                return Err(IoError::Config(format!("unknown student kind {:?} (mae, mlp, linear, lasso)", s.kind)));
            }
            if let Some(p) = &s.policy {
                s.policy = Some(p.resolved(s.seed)?);
            }
        }
        Ok(self)
    }
}

fn run_pseudo(c: &PseudoRun, out: &Path) -> Result<()> {
    let teacher = Bound::load(&c.teacher)?;
    teacher.require_mae("pseudo-label")?;
    let unlabeled = teacher.dataset(&c.unlabeled, 0)?;
    let cfg = c.ensemble.build()?;
    let rows: Vec<&[f64]> = (0..unlabeled.n_observations()).map(|i| unlabeled.row(i)).collect();
    let unknown: Vec<Mask> = rows.iter().map(|r| missing_mask(r)).collect();
    // Row i uses stream i, exactly as the sequential generator does.
    let pseudo: Vec<PseudoRow> = rows
        .par_iter()
        .zip(&unknown)
        .enumerate()
        .map(|(i, (row, m))| {
            pseudo_label_row(&teacher.loaded.model, row, m, &cfg, &teacher.means, &teacher.partition, i as u64)
        })
        .collect::<mrmae_core::Result<_>>()?;
    let (base_rows, base_ts) = match &c.labeled {
        Some(p) => {
            let ds = teacher.dataset(p, c.labeled_test_count)?;
            let idx = ds.indices(Split::Train);
            (idx.iter().map(|&i| ds.row(i).to_vec()).collect::<Vec<_>>(), idx.iter().map(|&i| ds.timestamps()[i]).collect())
        }
        None => (Vec::new(), Vec::<Timestamp>::new()),
    };
    let combined = PseudoLabeledDataset::new(base_rows, pseudo, c.pseudo_weight)?;
    let audit = combined.audit();
    if audit != combined.construction {
        return Err(IoError::Core(mrmae_core::Error::Internal("provenance audit disagrees with construction".into())));
    }
    let timestamps: Vec<Timestamp> = base_ts.iter().chain(unlabeled.timestamps()).copied().collect();
    let all_rows: Vec<Vec<f64>> = combined.rows().map(<[f64]>::to_vec).collect();
    write_dataset_csv(&out.join("dataset.csv"), &teacher.partition, &timestamps, &all_rows)?;
    let mut prov = Vec::new();
    let n_base = combined.base.len();
    for (r, t) in timestamps.iter().enumerate() {
        for j in 0..teacher.partition.n_features() {
            let p = if r < n_base { Provenance::Observed } else { combined.pseudo[r - n_base].provenance[j] };
            let mut line = feature_line(&teacher.partition, *t, j, 0.0);
            line[4] = match p {
                Provenance::Observed => "observed".into(),
                Provenance::Pseudo => "pseudo".into(),
            };
            line.insert(0, r.to_string());
            prov.push(line);
        }
    }
    write_csv(
        &out.join("provenance.csv"),
        &["row", "timestamp", "layer", "patch_row", "patch_col", "provenance"],
        prov,
    )?;
    write_json(
        &out.join("provenance_summary.json"),
        &serde_json::json!({"observed": audit.observed, "pseudo": audit.pseudo, "rows": combined.len()}),
    )?;
    if let Some(s) = &c.student {
        train_and_write_student(s, &combined, &teacher, out)?;
    }
    Ok(())
}

fn train_and_write_student(s: &StudentRun, combined: &PseudoLabeledDataset, teacher: &Bound, out: &Path) -> Result<()> {
    let kind = StudentKind::from_name(&s.kind).expect("validated");
    let spec = s.task.build(&teacher.partition);
    let task = spec.resolve(&teacher.partition)?;
    let policy = s.policy.unwrap_or(PolicySpec::FixedFraction { p: 0.7, seed: Some(s.seed) }).build(s.seed)?;
    let mae = s.fit.train_config(policy, s.seed)?;
    let n = teacher.partition.n_features();
    let cfg = StudentConfig {
        mlp: s.fit.supervised_config(s.seed)?,
        mlp_param_budget: s.param_budget.unwrap_or_else(|| parameter_count(&mae.architecture.dims(n, n))),
        mlp_activation: parse_activation(&s.fit.architecture.activation)?,
        lasso_penalty: s.lasso_penalty.unwrap_or(0.01),
        mae,
    };
    let student = train_student(combined, kind, &task, &teacher.means, &teacher.partition, &cfg)?;
    if !student.log().is_empty() {
        write_training_log(&out.join("student_log.csv"), student.log())?;
    }
    let (model, mkind, penalty) = match &student {
        Student::Mae { model, .. } => (model.clone(), ModelKind::Mae, None),
        Student::Mlp { model, .. } => (model.clone(), ModelKind::TaskMlp, None),
        Student::Linear(m) => (m.to_mlp(), ModelKind::Linear, None),
        Student::Lasso(m) => (m.to_mlp(), ModelKind::Lasso, Some(m.l1_penalty)),
    };
    let sc = &teacher.loaded.sidecar;
    let mut sidecar = Sidecar::new(mkind, &model, s.seed, &sc.norm_stats(), &sc.feature_means, &teacher.partition);
    if mkind != ModelKind::Mae {
        sidecar.task = Some(sidecar_task(&spec, &task));
    }
    sidecar.l1_penalty = penalty;
    write_checkpoint(&out.join("student.ckpt"), &model, &sidecar)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

pub fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
}

fn default_trials() -> usize {
    50
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { fractions: default_fractions(), trials: default_trials() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    #[serde(default = "default_permutations")]
    pub permutations: usize,
}

fn default_permutations() -> usize {
    9999
}

impl Default for TrendSpec {
    fn default() -> Self {
        TrendSpec { permutations: default_permutations() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub data: PathBuf,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default = "default_eval_split")]
    pub split: SplitChoice,
    pub task: TaskFileSpec,
    pub models: Vec<ModelRef>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub trend: Option<TrendSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_eval_split() -> SplitChoice {
    SplitChoice::Test
}

impl EvaluateRun {
    pub fn resolve(mut self, seed: Option<u64>, base: &Path) -> Result<Self> {
        self.seed = Some(self.seed.or(seed).unwrap_or(DEFAULT_SEED));
        self.data = absolute(&base.join(&self.data))?;
        if self.models.is_empty() {
            return Err(IoError::Config("evaluate needs at least one model".into()));
        }
        for i in 0..self.models.len() {
            if self.models[..i].iter().any(|m| m.name == self.models[i].name) {
                return Err(IoError::Config(format!("duplicate model name {}", self.models[i].name)));
            }
            self.models[i].path = absolute(&base.join(&self.models[i].path))?;
        }
        if let Some(s) = &self.sweep {
            SweepConfig { fractions: s.fractions.clone(), trials: s.trials, seed: 0 }.validate()?;
        }
        Ok(self)
    }
}

const MEAN_BASELINE: &str = "mean_baseline";

fn run_evaluate(c: &EvaluateRun, out: &Path) -> Result<()> {
    let seed = c.seed.unwrap_or(DEFAULT_SEED);
    let bound: Vec<Bound> = c.models.iter().map(|m| Bound::load(&m.path)).collect::<Result<_>>()?;
    let first = &bound[0];
    if let Some(b) = bound.iter().find(|b| b.loaded.sidecar.norm_stats_hash != first.loaded.sidecar.norm_stats_hash) {
        log::warn!("models were trained with different normalizations ({})", b.loaded.sidecar.norm_stats_hash);
    }
    let ds = first.dataset(&c.data, c.test_count)?;
    let spec = c.task.build(&first.partition);
    let task = spec.resolve(&first.partition)?;
    // Rows whose task outputs are all missing cannot be scored.
    let all = c.split.rows(&ds);
    let idx: Vec<usize> =
        all.iter().copied().filter(|&i| task.outputs.iter().any(|&j| !ds.row(i)[j].is_nan())).collect();
    if idx.len() < all.len() {
        log::warn!("skipping {} rows without observed task outputs", all.len() - idx.len());
    }
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.row(i)).collect();
    if rows.is_empty() {
        return Err(IoError::Config("the evaluated split has no rows with observed task outputs".into()));
    }
    let predictors: Vec<Box<dyn TaskPredictor + '_>> = c
        .models
        .iter()
        .zip(&bound)
        .map(|(m, b)| b.predictor(&m.name, &task, m.ensemble.as_ref()))
        .collect::<Result<_>>()?;
    let baseline = ConstantPredictor { name: MEAN_BASELINE.into(), values: task.gather_outputs(&first.means.means) };
    let accs: Vec<f64> = predictors
        .iter()
        .map(|p| p.as_ref())
        .chain(std::iter::once(&baseline as &dyn TaskPredictor))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| mean_accuracy(*p, &rows, &task, &first.means, seed))
        .collect::<mrmae_core::Result<_>>()?;
    write_csv(
        &out.join("accuracy.csv"),
        &["model", "accuracy"],
        predictors
            .iter()
            .map(|p| p.name())
            .chain([MEAN_BASELINE])
            .zip(&accs)
            .map(|(name, a)| vec![name.to_string(), fmt_value(*a)]),
    )?;
    if let Some(s) = &c.sweep {
        let cfg = SweepConfig { fractions: s.fractions.clone(), trials: s.trials, seed };
        // Masks depend only on (seed, fraction, trial, row), so models can be
        // swept independently and interleaved afterwards.
        let per_model: Vec<Vec<SweepRow>> = predictors
            .par_iter()
            .map(|p| masking_sweep(&cfg, &[p.as_ref()], &rows, &task, &first.means))
            .collect::<mrmae_core::Result<_>>()?;
        let mut lines = Vec::new();
        for fi in 0..cfg.fractions.len() {
            for table in &per_model {
                let r = &table[fi];
                lines.push(vec![
                    r.model.clone(),
                    fmt_value(r.fraction),
                    fmt_value(r.mean_acc),
                    fmt_value(r.std_acc),
                    r.trials.to_string(),
                ]);
            }
        }
        write_csv(&out.join("sweep.csv"), &["model", "fraction", "mean_acc", "std_acc", "trials"], lines)?;
    }
    if let Some(t) = &c.trend {
        let results: Vec<(Vec<f64>, [f64; 4])> = predictors
            .par_iter()
            .map(|p| -> mrmae_core::Result<_> {
                let series = per_row_accuracy(p.as_ref(), &rows, &task, &first.means, seed)?;
                let trend = linear_trend(&series)?;
                let pseed = rng::derive_seed(seed, &[rng::hash_str(p.name())]);
                let less = slope_permutation_p(&series, Alternative::Less, t.permutations, pseed)?;
                let two = slope_permutation_p(&series, Alternative::TwoSided, t.permutations, pseed)?;
                Ok((series, [trend.slope, trend.intercept, less, two]))
            })
            .collect::<mrmae_core::Result<_>>()?;
        write_csv(
            &out.join("trend.csv"),
            &["model", "slope", "intercept", "p_less", "p_two_sided"],
            predictors.iter().zip(&results).map(|(p, (_, v))| {
                std::iter::once(p.name().to_string()).chain(v.iter().map(|x| fmt_value(*x))).collect::<Vec<_>>()
            }),
        )?;
        let mut lines = Vec::new();
        for (p, (series, _)) in predictors.iter().zip(&results) {
            for (&i, a) in idx.iter().zip(series) {
                lines.push(vec![p.name().to_string(), fmt_timestamp(ds.timestamps()[i]), fmt_value(*a)]);
            }
        }
        write_csv(&out.join("row_accuracy.csv"), &["model", "timestamp", "accuracy"], lines)?;
    }
    Ok(())
}

/// Reads a model checkpoint into an autoencoder for callers outside the CLI.
pub fn load_model(path: &Path) -> Result<(MlpModel, Sidecar)> {
    let l = read_checkpoint(path)?;
    Ok((l.model, l.sidecar))
}
