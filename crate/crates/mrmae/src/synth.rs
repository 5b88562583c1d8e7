//! Synthetic layered datasets with planted dependencies.
//!
//! A [`SyntheticSpec`] names a set of layers (patch grids) and rules that
//! define features as functions of other features: random linear mixes of
//! whole layers, patch-wise copies and products, time lags and explicit
//! linear terms, each with optional Gaussian noise. Features without a rule
//! are independent standard normal draws. Hidden layers take part in the
//! generation but are not emitted, which is how shared latent factors are
//! expressed. A per-layer drift adds `drift · t` to every value.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use mrmae_core::dataset::{GridLayer, LayerManifest, LayerPartition, LayeredDataset, Timestamp};
use mrmae_core::rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub layers: Vec<SynthLayer>,
    #[serde(default)]
    pub rules: Vec<Rule>,
    /// Pixels per patch side in the emitted grids.
    #[serde(default = "one")]
    pub patch_size: usize,
    /// Number of monthly timestamps.
    pub k: usize,
    /// First timestamp as `[year, month]`.
    #[serde(default = "default_start")]
    pub start: (i32, u8),
    pub seed: u64,
    /// Grids that are not written (their cells load as missing).
    #[serde(default)]
    pub missing: Vec<MissingRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLayer {
    pub name: String,
    pub patch_rows: usize,
    pub patch_cols: usize,
    #[serde(default)]
    pub hidden: bool,
    /// Linear trend added per timestamp.
    #[serde(default)]
    pub drift: f64,
    /// Amplitude of an annual sinusoid.
    #[serde(default)]
    pub seasonal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub target: Target,
    pub formula: Formula,
    #[serde(default)]
    pub noise: f64,
}

/// A whole layer, or a single patch (flat index) of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub layer: String,
    #[serde(default)]
    pub patch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub layer: String,
    pub patch: usize,
    pub coeff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthActivation {
    #[default]
    None,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Formula {
    /// Random linear mix of every feature of the source layers, coefficients
    /// `N(0, scale² / fan_in)`, optionally squashed.
    Mix {
        sources: Vec<String>,
        #[serde(default = "one_f")]
        scale: f64,
        #[serde(default)]
        activation: SynthActivation,
    },
    /// `coeff · source[p]`, patch by patch.
    Copy {
        source: String,
        #[serde(default = "one_f")]
        coeff: f64,
    },
    /// `coeff · a[p] · b[p]`, patch by patch.
    Product {
        a: String,
        b: String,
        #[serde(default = "one_f")]
        coeff: f64,
    },
    /// `coeff · source[p](t − lag)`; zero before the first `lag` timestamps.
    Lag {
        source: String,
        lag: usize,
        #[serde(default = "one_f")]
        coeff: f64,
    },
    /// Explicit `bias + Σ coeff · feature`.
    Linear {
        terms: Vec<Term>,
        #[serde(default)]
        bias: f64,
    },
}

/// Timestamps `from..to` of `layer` are not written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingRange {
    pub layer: String,
    pub from: usize,
    pub to: usize,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

fn default_start() -> (i32, u8) {
    (2000, 1)
}

/// One resolved parent edge of the ground-truth graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub feature: usize,
    pub coeff: f64,
    /// 0 for same-timestamp edges.
    pub lag: usize,
}

/// Resolved generating formula of one feature (indices over all layers,
/// hidden ones included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTruth {
    pub feature: usize,
    pub layer: String,
    pub patch: usize,
    pub hidden: bool,
    /// `None` marks a free standard-normal feature.
    pub linear: Option<Vec<Edge>>,
    pub product: Option<(usize, usize, f64)>,
    pub activation: SynthActivation,
    pub bias: f64,
    pub noise: f64,
    pub drift: f64,
    pub seasonal: f64,
}

impl FeatureTruth {
    fn free(feature: usize, layer: &SynthLayer, patch: usize) -> Self {
        FeatureTruth {
            feature,
            layer: layer.name.clone(),
            patch,
            hidden: layer.hidden,
            linear: None,
            product: None,
            activation: SynthActivation::None,
            bias: 0.0,
            noise: 1.0,
            drift: layer.drift,
            seasonal: layer.seasonal,
        }
    }

    /// Same-timestamp parents.
    pub fn parents(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self
            .linear
            .iter()
            .flatten()
            .filter(|e| e.lag == 0)
            .map(|e| e.feature)
            .collect();
        if let Some((a, b, _)) = self.product {
            p.extend([a, b]);
        }
        p.sort_unstable();
        p.dedup();
        p
    }
}

/// The saved ground-truth dependency graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub features: Vec<FeatureTruth>,
    /// Generation order (a topological order of same-timestamp edges).
    pub order: Vec<usize>,
    /// Emitted features, in dataset order, as indices into `features`.
    pub visible: Vec<usize>,
}

impl GroundTruth {
    /// Dataset index of a generating feature, if it is emitted.
    pub fn dataset_index(&self, feature: usize) -> Option<usize> {
        self.visible.iter().position(|&f| f == feature)
    }
}

/// A generated dataset.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SyntheticSpec,
    pub manifest: LayerManifest,
    /// `k × n` emitted feature values (missing grids are NaN).
    pub values: Vec<Vec<f64>>,
    pub truth: GroundTruth,
}

impl SynthData {
    /// Grid of emitted layer `layer` at timestamp `t` as stored on disk
    /// (`None` for a missing grid).
    pub fn grid(&self, t: usize, layer: usize) -> Option<Vec<f32>> {
        let partition = self.manifest.partition();
        let info = &partition.layers()[layer];
        let values = &self.values[t][info.range()];
        if values.iter().all(|v| v.is_nan()) {
            return None;
        }
        let p = self.manifest.patch_size;
        let cols = info.patch_cols * p;
        let mut grid = vec![0f32; info.patch_rows * p * cols];
        for (r, row) in grid.chunks_mut(cols).enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = values[(r / p) * info.patch_cols + c / p] as f32;
            }
        }
        Some(grid)
    }

    /// The dataset exactly as it loads back from the emitted grid files.
    pub fn dataset(&self, test_count: usize) -> Result<LayeredDataset> {
        let grids: Vec<Vec<Vec<f64>>> = (0..self.values.len())
            .map(|t| {
                self.manifest
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(li, l)| match self.grid(t, li) {
                        Some(g) => g.into_iter().map(f64::from).collect(),
                        None => vec![f64::NAN; l.rows * l.cols],
                    })
                    .collect()
            })
            .collect();
        Ok(LayeredDataset::from_grids(&self.manifest, &grids, test_count)?)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(IoError::Config("synthetic spec has no layers".into()));
        }
        if self.layers.iter().all(|l| l.hidden) {
            return Err(IoError::Config("synthetic spec has no visible layer".into()));
        }
        if self.k == 0 {
            return Err(IoError::Config("synthetic spec needs k ≥ 1 timestamps".into()));
        }
        if self.patch_size == 0 {
            return Err(IoError::Config("patch_size must be positive".into()));
        }
        if !(1..=12).contains(&self.start.1) {
            return Err(IoError::Config(format!("invalid start month {}", self.start.1)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.patch_rows == 0 || l.patch_cols == 0 {
                return Err(IoError::Config(format!("layer {} has an empty patch grid", l.name)));
            }
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(IoError::Config(format!("duplicate layer name {}", l.name)));
            }
            if !l.drift.is_finite() || !l.seasonal.is_finite() {
                return Err(IoError::Config(format!("layer {} has a non-finite drift", l.name)));
            }
        }
        for r in &self.rules {
            if !(r.noise >= 0.0) || !r.noise.is_finite() {
                return Err(IoError::Config(format!("rule for {} has invalid noise σ {}", r.target.layer, r.noise)));
            }
        }
        for m in &self.missing {
            self.layer(&m.layer)?;
            if m.from > m.to {
                return Err(IoError::Config(format!("missing range for {} is reversed", m.layer)));
            }
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| IoError::Config(format!("unknown layer {name} in synthetic spec")))
    }

    fn partition(&self) -> LayerPartition {
        LayerPartition::new(self.layers.iter().map(|l| (l.name.clone(), l.patch_rows, l.patch_cols)))
    }

    fn timestamps(&self) -> Vec<Timestamp> {
        let (year, month) = self.start;
        (0..self.k)
            .map(|t| {
                let m = (month as usize - 1) + t;
                Timestamp::new(year + (m / 12) as i32, (m % 12) as u8 + 1)
            })
            .collect()
    }

    /// Resolves the rules into per-feature formulas.
    pub fn resolve(&self) -> Result<Vec<FeatureTruth>> {
        self.validate()?;
        let partition = self.partition();
        let mut features = Vec::with_capacity(partition.n_features());
        for (li, layer) in self.layers.iter().enumerate() {
            for p in 0..partition.layers()[li].len() {
                features.push(FeatureTruth::free(features.len(), layer, p));
            }
        }
        let mut coeff_rng = rng::derived(self.seed, &[0x5e7_1, 1]);
        // Whole-layer rules first so that patch rules refine them.
        let ordered = self
            .rules
            .iter()
            .filter(|r| r.target.patch.is_none())
            .chain(self.rules.iter().filter(|r| r.target.patch.is_some()));
        for rule in ordered {
            let li = self.layer(&rule.target.layer)?;
            let range = partition.layers()[li].range();
            let patches: Vec<usize> = match rule.target.patch {
                None => (0..range.len()).collect(),
                Some(p) if p < range.len() => vec![p],
                Some(p) => {
                    return Err(IoError::Config(format!("layer {} has no patch {p}", rule.target.layer)));
                }
            };
            for p in patches {
                let f = &mut features[range.start + p];
                f.noise = rule.noise;
                f.linear = Some(Vec::new());
                f.product = None;
                f.activation = SynthActivation::None;
                f.bias = 0.0;
                let same_patch = |name: &str| -> Result<usize> {
                    let si = self.layer(name)?;
                    let src = &partition.layers()[si];
                    if p >= src.len() {
                        return Err(IoError::Config(format!("layer {name} has no patch {p}")));
                    }
                    Ok(src.start + p)
                };
                match &rule.formula {
                    Formula::Mix { sources, scale, activation } => {
                        let mut fan_in = Vec::new();
                        for s in sources {
                            fan_in.extend(partition.layers()[self.layer(s)?].range());
                        }
                        if fan_in.is_empty() {
                            return Err(IoError::Config("mix rule without sources".into()));
                        }
                        let sd = scale / (fan_in.len() as f64).sqrt();
                        let edges = fan_in
                            .into_iter()
                            .map(|src| {
                                let z: f64 = StandardNormal.sample(&mut coeff_rng);
                                Edge { feature: src, coeff: sd * z, lag: 0 }
                            })
                            .collect();
                        f.linear = Some(edges);
                        f.activation = *activation;
                    }
                    Formula::Copy { source, coeff } => {
                        f.linear = Some(vec![Edge { feature: same_patch(source)?, coeff: *coeff, lag: 0 }]);
                    }
                    Formula::Product { a, b, coeff } => {
                        f.product = Some((same_patch(a)?, same_patch(b)?, *coeff));
                    }
                    Formula::Lag { source, lag, coeff } => {
                        f.linear = Some(vec![Edge { feature: same_patch(source)?, coeff: *coeff, lag: *lag }]);
                    }
                    Formula::Linear { terms, bias } => {
                        let mut edges = Vec::with_capacity(terms.len());
                        for t in terms {
                            let src = &partition.layers()[self.layer(&t.layer)?];
                            if t.patch >= src.len() {
                                return Err(IoError::Config(format!("layer {} has no patch {}", t.layer, t.patch)));
                            }
                            edges.push(Edge { feature: src.start + t.patch, coeff: t.coeff, lag: 0 });
                        }
                        f.linear = Some(edges);
                        f.bias = *bias;
                    }
                }
            }
        }
        Ok(features)
    }
}

/// Topological order of the same-timestamp dependency graph; smallest ready
/// index first. A cycle is a configuration error.
pub fn generation_order(features: &[FeatureTruth]) -> Result<Vec<usize>> {
    let n = features.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for f in features {
        for p in f.parents() {
            indegree[f.feature] += 1;
            children[p].push(f.feature);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<String> = (0..n)
            .filter(|&i| indegree[i] > 0)
            .take(4)
            .map(|i| format!("{}[{}]", features[i].layer, features[i].patch))
            .collect();
        return Err(IoError::Config(format!(
            "synthetic dependency graph has a cycle through {}",
            stuck.join(", ")
        )));
    }
    Ok(order)
}

/// Draws the dataset described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SynthData> {
    let features = spec.resolve()?;
    let order = generation_order(&features)?;
    let timestamps = spec.timestamps();
    let n_all = features.len();
    let mut all = vec![vec![0.0; n_all]; spec.k];
    let mut noise_rng = rng::derived(spec.seed, &[0x5e7_1, 2]);
    for t in 0..spec.k {
        let phase = 2.0 * PI * f64::from(timestamps[t].month - 1) / 12.0;
        for &j in &order {
            let f = &features[j];
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            let mut v = match &f.linear {
                None if f.product.is_none() => z,
                _ => {
                    let mut s = f.bias;
                    for e in f.linear.iter().flatten() {
                        s += e.coeff
                            * match e.lag {
                                0 => all[t][e.feature],
                                lag if t >= lag => all[t - lag][e.feature],
                                _ => 0.0,
                            };
                    }
                    if let Some((a, b, c)) = f.product {
                        s += c * all[t][a] * all[t][b];
                    }
                    if f.activation == SynthActivation::Tanh {
                        s = s.tanh();
                    }
                    s + f.noise * z
                }
            };
            v += f.drift * t as f64 + f.seasonal * phase.sin();
            all[t][j] = v;
        }
    }
    let visible: Vec<usize> = features.iter().filter(|f| !f.hidden).map(|f| f.feature).collect();
    let partition = spec.partition();
    let mut values: Vec<Vec<f64>> = all.iter().map(|row| visible.iter().map(|&j| row[j]).collect()).collect();
    let visible_layers: Vec<&SynthLayer> = spec.layers.iter().filter(|l| !l.hidden).collect();
    let manifest = LayerManifest {
        layers: visible_layers
            .iter()
            .map(|l| GridLayer {
                name: l.name.clone(),
                rows: l.patch_rows * spec.patch_size,
                cols: l.patch_cols * spec.patch_size,
            })
            .collect(),
        patch_size: spec.patch_size,
        timestamps,
    };
    let out_partition = manifest.partition();
    for m in &spec.missing {
        let Some(li) = out_partition.index_of(&m.layer) else {
            continue;
        };
        let range = out_partition.layers()[li].range();
        for row in values.iter_mut().take(m.to.min(spec.k)).skip(m.from) {
            row[range.clone()].fill(f64::NAN);
        }
    }
    debug_assert_eq!(partition.n_features(), n_all);
    Ok(SynthData {
        spec: spec.clone(),
        manifest,
        values,
        truth: GroundTruth { features, order, visible },
    })
}
