//! Pseudo-label pipeline: a teacher ensemble fills in the unknown features of
//! unlabeled observations, the completed rows join the training set, and a
//! student is trained on the union.

use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{fit_linear, width_for_budget, LinearModel, TaskIndices};
use crate::dataset::{FeatureMeans, LayerPartition};
use crate::ensemble::{ensemble_predict, EnsembleConfig};
use crate::error::{config_err, Error, Result};
use crate::masking::{apply_mask, Mask};
use crate::nnet::{Activation, MlpModel};
use crate::training::{
    init_model, train_autoencoder, train_supervised, Architecture, EpochLog, SupervisedConfig, TrainConfig, TrainSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoRow {
    pub values: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// Completes every unlabeled row: features in `unknown[i]` come from the
/// teacher ensemble, everything else is copied verbatim.
pub fn generate_pseudo_labels(
    teacher: &MlpModel,
    unlabeled: &[&[f64]],
    unknown: &[Mask],
    cfg: &EnsembleConfig,
    means: &FeatureMeans,
    partition: &LayerPartition,
) -> Result<Vec<PseudoRow>> {
    if unlabeled.len() != unknown.len() {
        return Err(config_err!("{} unlabeled rows but {} masks", unlabeled.len(), unknown.len()));
    }
    unlabeled
        .iter()
        .zip(unknown)
        .enumerate()
        .map(|(i, (row, mask))| pseudo_label_row(teacher, row, mask, cfg, means, partition, i as u64))
        .collect()
}

/// One row of [`generate_pseudo_labels`]; `stream` is the row's random stream.
pub fn pseudo_label_row(
    teacher: &MlpModel,
    row: &[f64],
    mask: &Mask,
    cfg: &EnsembleConfig,
    means: &FeatureMeans,
    partition: &LayerPartition,
    stream: u64,
) -> Result<PseudoRow> {
    let mut values = row.to_vec();
    let mut provenance = vec![Provenance::Observed; row.len()];
    if !mask.is_empty() {
        let x = apply_mask(row, mask, means)?;
        let p = ensemble_predict(teacher, &x, mask, means, partition, cfg, stream)?;
        for j in mask.iter() {
            values[j] = p[j];
            provenance[j] = Provenance::Pseudo;
        }
    }
    Ok(PseudoRow { values, provenance })
}

/// Counts recorded while the combined dataset was assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProvenanceCounts {
    pub observed: usize,
    pub pseudo: usize,
}

/// Labeled training rows plus appended pseudo-labeled rows.
#[derive(Debug, Clone)]
pub struct PseudoLabeledDataset {
    pub base: Vec<Vec<f64>>,
    pub pseudo: Vec<PseudoRow>,
    /// Weight of every pseudo row relative to a labeled row.
    pub pseudo_weight: f64,
    pub construction: ProvenanceCounts,
}

impl PseudoLabeledDataset {
    pub fn new(base: Vec<Vec<f64>>, pseudo: Vec<PseudoRow>, pseudo_weight: f64) -> Result<Self> {
        if !(pseudo_weight >= 0.0) || !pseudo_weight.is_finite() {
            return Err(config_err!("pseudo weight {pseudo_weight} must be finite and >= 0"));
        }
        let mut c = ProvenanceCounts { observed: base.iter().map(Vec::len).sum(), pseudo: 0 };
        for r in &pseudo {
            for p in &r.provenance {
                match p {
                    Provenance::Observed => c.observed += 1,
                    Provenance::Pseudo => c.pseudo += 1,
                }
            }
        }
        Ok(PseudoLabeledDataset { base, pseudo, pseudo_weight, construction: c })
    }

    /// Recounts observed vs pseudo feature values from the rows themselves.
    pub fn audit(&self) -> ProvenanceCounts {
        let mut c = ProvenanceCounts::default();
        c.observed += self.base.iter().map(Vec::len).sum::<usize>();
        for r in &self.pseudo {
            c.pseudo += r.provenance.iter().filter(|p| **p == Provenance::Pseudo).count();
            c.observed += r.provenance.iter().filter(|p| **p == Provenance::Observed).count();
        }
        c
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.base.iter().map(Vec::as_slice).chain(self.pseudo.iter().map(|r| r.values.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row weights (labeled 1, pseudo `pseudo_weight`) and groups (0, 1).
    fn weights_and_groups(&self) -> (Vec<f64>, Vec<usize>) {
        let w = std::iter::repeat_n(1.0, self.base.len())
            .chain(std::iter::repeat_n(self.pseudo_weight, self.pseudo.len()))
            .collect();
        let g = std::iter::repeat_n(0, self.base.len())
            .chain(std::iter::repeat_n(1, self.pseudo.len()))
            .collect();
        (w, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentKind {
    Mae,
    Mlp,
    Linear,
    Lasso,
}

impl StudentKind {
    pub fn name(self) -> &'static str {
        match self {
            StudentKind::Mae => "mae",
            StudentKind::Mlp => "mlp",
            StudentKind::Linear => "linear",
            StudentKind::Lasso => "lasso",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mae" => Some(StudentKind::Mae),
            "mlp" => Some(StudentKind::Mlp),
            "linear" => Some(StudentKind::Linear),
            "lasso" => Some(StudentKind::Lasso),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentConfig {
    /// Autoencoder student settings.
    pub mae: TrainConfig,
    /// Task-MLP settings.
    pub mlp: SupervisedConfig,
    pub mlp_param_budget: usize,
    pub mlp_activation: Activation,
    pub lasso_penalty: f64,
}

#[derive(Debug, Clone)]
pub enum Student {
    Mae { model: MlpModel, log: Vec<EpochLog> },
    Mlp { model: MlpModel, log: Vec<EpochLog> },
    Linear(LinearModel),
    Lasso(LinearModel),
}

/// Per-origin training loss of a finished student (`group_loss` in the epoch
/// logs carries the same split per epoch for the iterative students).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OriginLoss {
    pub observed: f64,
    pub pseudo: f64,
}

/// Trains `kind` on the combined rows, treating pseudo-labels as truth.
pub fn train_student(
    combined: &PseudoLabeledDataset,
    kind: StudentKind,
    task: &TaskIndices,
    means: &FeatureMeans,
    partition: &LayerPartition,
    cfg: &StudentConfig,
) -> Result<Student> {
    if combined.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    let (weights, groups) = combined.weights_and_groups();
    match kind {
        StudentKind::Mae => {
            let n = means.len();
            let model = init_model(n, n, &cfg.mae.architecture, cfg.mae.seed)?;
            let set = TrainSet { rows: combined.rows().collect(), weights: Some(weights), groups: Some(groups) };
            let out = train_autoencoder(model, &set, means, partition, &cfg.mae)?;
            Ok(Student::Mae { model: out.model, log: out.log })
        }
        StudentKind::Mlp => {
            let (xs, ys, w, g) = task_pairs(combined, task, &weights, &groups);
            let h = width_for_budget(task.inputs.len(), task.outputs.len(), cfg.mlp_param_budget)?;
            let arch = Architecture { hidden: Some(vec![h, h]), activation: cfg.mlp_activation };
            let model = init_model(task.inputs.len(), task.outputs.len(), &arch, cfg.mlp.seed)?;
            let out = train_supervised(model, &xs, &ys, Some(&w), Some(&g), &cfg.mlp)?;
            Ok(Student::Mlp { model: out.model, log: out.log })
        }
        StudentKind::Linear | StudentKind::Lasso => {
            let (xs, ys, w, _) = task_pairs(combined, task, &weights, &groups);
            let (xs, ys) = replicate_by_weight(xs, ys, &w)?;
            let penalty = if kind == StudentKind::Lasso { cfg.lasso_penalty } else { 0.0 };
            if kind == StudentKind::Lasso && penalty <= 0.0 {
                return Err(config_err!("lasso student needs a positive penalty"));
            }
            let m = fit_linear(&xs, &ys, penalty)?;
            Ok(if kind == StudentKind::Lasso { Student::Lasso(m) } else { Student::Linear(m) })
        }
    }
}

type Pairs = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<usize>);

fn task_pairs(combined: &PseudoLabeledDataset, task: &TaskIndices, weights: &[f64], groups: &[usize]) -> Pairs {
    let mut out: Pairs = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ((row, &w), &g) in combined.rows().zip(weights).zip(groups) {
        let x = task.gather_inputs(row);
        let y = task.gather_outputs(row);
        if x.iter().chain(&y).all(|v| v.is_finite()) {
            out.0.push(x);
            out.1.push(y);
            out.2.push(w);
            out.3.push(g);
        }
    }
    out
}

/// Closed-form fits take integer weights by row replication.
fn replicate_by_weight(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, w: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if w.iter().all(|&v| v == 1.0) {
        return Ok((xs, ys));
    }
    if w.iter().any(|&v| v != libm::round(v)) {
        return Err(Error::Config("linear students support integer row weights only".into()));
    }
    let mut ox = Vec::new();
    let mut oy = Vec::new();
    for ((x, y), &k) in xs.into_iter().zip(ys).zip(w) {
        for _ in 0..(k as usize) {
            ox.push(x.clone());
            oy.push(y.clone());
        }
    }
    Ok((ox, oy))
}

impl Student {
    /// Task-output predictions from a full (imputed) feature vector.
    pub fn predict(&self, x_full: &[f64], task: &TaskIndices) -> Result<Vec<f64>> {
        match self {
            Student::Mae { model, .. } => Ok(task.gather_outputs(&model.forward(x_full)?)),
            Student::Mlp { model, .. } => model.forward(&task.gather_inputs(x_full)),
            Student::Linear(m) | Student::Lasso(m) => Ok(m.predict(&task.gather_inputs(x_full))),
        }
    }

    pub fn log(&self) -> &[EpochLog] {
        match self {
            Student::Mae { log, .. } | Student::Mlp { log, .. } => log,
            _ => &[],
        }
    }

    /// Mean L1 training loss on task outputs split by row origin.
    pub fn origin_loss(
        &self,
        combined: &PseudoLabeledDataset,
        task: &TaskIndices,
        means: &FeatureMeans,
    ) -> Result<OriginLoss> {
        let mut acc = [(0.0, 0usize); 2];
        for (g, row) in combined.rows().enumerate() {
            let slot = usize::from(g >= combined.base.len());
            let given = Mask::from_indices(task.outputs.iter().copied());
            let x = apply_mask(row, &given, means)?;
            if x.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let pred = self.predict(&x, task)?;
            for (p, &j) in pred.iter().zip(&task.outputs) {
                if row[j].is_finite() {
                    acc[slot].0 += libm::fabs(p - row[j]);
                    acc[slot].1 += 1;
                }
            }
        }
        let avg = |(s, c): (f64, usize)| if c > 0 { s / c as f64 } else { f64::NAN };
        Ok(OriginLoss { observed: avg(acc[0]), pseudo: avg(acc[1]) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskPolicy;
    use crate::nnet::Dense;

    fn constant_teacher(b: f64, n: usize) -> MlpModel {
        let mut out = Dense::zeros(2 * n, n);
        out.biases = vec![b; n];
        MlpModel::from_layers(vec![Dense::zeros(n, 2 * n), out], Activation::Relu).unwrap()
    }

    #[test]
    fn empty_mask_returns_observed_row() {
        let t = constant_teacher(3.0, 4);
        let means = FeatureMeans { means: vec![0.0; 4], source: "t".into() };
        let part = LayerPartition::flat(&[4]);
        let cfg = EnsembleConfig::new(4, MaskPolicy::fixed(0.5, 0).unwrap(), 1).unwrap();
        let row = [0.1, 0.2, 0.3, 0.4];
        let out = generate_pseudo_labels(&t, &[&row], &[Mask::empty()], &cfg, &means, &part).unwrap();
        assert_eq!(out[0].values, row);
        assert!(out[0].provenance.iter().all(|p| *p == Provenance::Observed));
    }

    #[test]
    fn constant_teacher_labels() {
        let t = constant_teacher(-1.5, 4);
        let means = FeatureMeans { means: vec![0.0; 4], source: "t".into() };
        let part = LayerPartition::flat(&[4]);
        let cfg = EnsembleConfig::new(4, MaskPolicy::fixed(0.75, 0).unwrap(), 1).unwrap();
        let row = [0.1, 0.2, 0.3, 0.4];
        let mask = Mask::from_indices([2, 3]);
        let out = generate_pseudo_labels(&t, &[&row], &[mask], &cfg, &means, &part).unwrap();
        assert_eq!(out[0].values, vec![0.1, 0.2, -1.5, -1.5]);
        assert_eq!(out[0].provenance[2], Provenance::Pseudo);
    }

    #[test]
    fn audit_matches_construction() {
        let rows = vec![PseudoRow {
            values: vec![0.0; 3],
            provenance: vec![Provenance::Observed, Provenance::Pseudo, Provenance::Pseudo],
        }];
        let d = PseudoLabeledDataset::new(vec![vec![1.0; 3]; 2], rows, 1.0).unwrap();
        assert_eq!(d.audit(), d.construction);
        assert_eq!(d.construction, ProvenanceCounts { observed: 7, pseudo: 2 });
        assert!(PseudoLabeledDataset::new(vec![], vec![], -1.0).is_err());
    }
}
