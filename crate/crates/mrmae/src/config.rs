//! JSON configuration documents and their conversion into core settings.

use mrmae_core::baselines::TaskSpec;
use mrmae_core::ensemble::EnsembleConfig;
use mrmae_core::masking::{MaskKind, MaskPolicy};
use mrmae_core::nnet::{Activation, OptimKind};
use mrmae_core::training::{Architecture, LossBase, LossConfig, OptimizerConfig, SupervisedConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

/// Masking policy as written in config files, e.g.
/// `{"kind":"fixed_fraction","p":0.7,"seed":42}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    FixedFraction {
        p: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    UniformFraction {
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
    LayerSubset {
        q: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl PolicySpec {
    /// Builds the policy; a missing seed falls back to `default_seed`.
    pub fn build(&self, default_seed: u64) -> Result<MaskPolicy> {
        let (kind, seed) = match *self {
            PolicySpec::FixedFraction { p, seed } => (MaskKind::FixedFraction { p }, seed),
            PolicySpec::UniformFraction { lo, hi, seed } => {
                (MaskKind::UniformFraction { lo: lo.unwrap_or(0.0), hi: hi.unwrap_or(0.99) }, seed)
            }
            PolicySpec::LayerSubset { q, seed } => (MaskKind::LayerSubset { q }, seed),
        };
        Ok(MaskPolicy::new(kind, seed.unwrap_or(default_seed))?)
    }

    /// The same policy with every default filled in.
    pub fn resolved(&self, default_seed: u64) -> Result<PolicySpec> {
        let p = self.build(default_seed)?;
        Ok(match p.kind() {
            MaskKind::FixedFraction { p: f } => PolicySpec::FixedFraction { p: f, seed: Some(p.seed()) },
            MaskKind::UniformFraction { lo, hi } => {
                PolicySpec::UniformFraction { lo: Some(lo), hi: Some(hi), seed: Some(p.seed()) }
            }
            MaskKind::LayerSubset { q } => PolicySpec::LayerSubset { q, seed: Some(p.seed()) },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default = "default_base")]
    pub base: String,
    #[serde(default = "one")]
    pub masked_weight: f64,
    #[serde(default = "tenth")]
    pub unmasked_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { base: default_base(), masked_weight: 1.0, unmasked_weight: 0.1 }
    }
}

fn default_base() -> String {
    "l1".into()
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

impl LossSpec {
    pub fn build(&self) -> Result<LossConfig> {
        let base = match self.base.as_str() {
            "l1" => LossBase::L1,
            "l2" => LossBase::L2,
            other => return Err(IoError::Config(format!("unknown loss base {other:?} (expected l1 or l2)"))),
        };
        let cfg = LossConfig { base, masked_weight: self.masked_weight, unmasked_weight: self.unmasked_weight };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// `null` or 0 selects plain SGD.
    #[serde(default = "default_momentum")]
    pub momentum: Option<f64>,
}

fn default_lr() -> f64 {
    0.05
}

fn default_momentum() -> Option<f64> {
    Some(0.9)
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec { learning_rate: default_lr(), momentum: default_momentum() }
    }
}

impl OptimizerSpec {
    pub fn build(&self) -> Result<OptimizerConfig> {
        let kind = match self.momentum {
            Some(beta) if beta != 0.0 => OptimKind::Momentum { beta },
            _ => OptimKind::Sgd,
        };
        let cfg = OptimizerConfig { learning_rate: self.learning_rate, kind };
        cfg.build()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    /// Hidden widths; `null` means two layers of `4n`.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: String,
}

fn default_activation() -> String {
    "relu".into()
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec { hidden: None, activation: default_activation() }
    }
}

pub fn parse_activation(name: &str) -> Result<Activation> {
    Activation::from_name(name)
        .ok_or_else(|| IoError::Config(format!("unknown activation {name:?} (expected relu, tanh or identity)")))
}

impl ArchitectureSpec {
    pub fn build(&self) -> Result<Architecture> {
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(IoError::Config("hidden widths must be positive".into()));
        }
        Ok(Architecture { hidden: self.hidden.clone(), activation: parse_activation(&self.activation)? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFileSpec {
    /// Input layers; empty means every layer that is not an output.
    #[serde(default)]
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl TaskFileSpec {
    pub fn build(&self, partition: &mrmae_core::dataset::LayerPartition) -> TaskSpec {
        if self.inputs.is_empty() {
            let outs: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
            TaskSpec::complement(partition, &outs)
        } else {
            TaskSpec { input_layers: self.inputs.clone(), output_layers: self.outputs.clone() }
        }
    }
}

/// Optimization settings shared by every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub architecture: ArchitectureSpec,
}

fn default_epochs() -> usize {
    100
}

fn default_batch() -> usize {
    32
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec {
            epochs: default_epochs(),
            batch_size: default_batch(),
            loss: LossSpec::default(),
            optimizer: OptimizerSpec::default(),
            architecture: ArchitectureSpec::default(),
        }
    }
}

impl FitSpec {
    pub fn train_config(&self, policy: MaskPolicy, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            policy,
            loss: self.loss.build()?,
            optimizer: self.optimizer.build()?,
            architecture: self.architecture.build()?,
            seed,
            snapshot_every: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn supervised_config(&self, seed: u64) -> Result<SupervisedConfig> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(IoError::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(SupervisedConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss.build()?.base,
            optimizer: self.optimizer.build()?,
            seed,
        })
    }
}

/// Implicit-ensemble settings (`--ensemble-iters`, `--ensemble-mask-frac`,
/// `--ensemble-seed`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub iterations: usize,
    pub mask_frac: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<EnsembleConfig> {
        Ok(EnsembleConfig::new(self.iterations, MaskPolicy::fixed(self.mask_frac, self.seed)?, self.seed)?)
    }
}
