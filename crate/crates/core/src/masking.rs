//! Random masks and mean-imputation.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::dataset::{FeatureMeans, LayerPartition};
use crate::error::{config_err, Error, Result};
use crate::rng::{self, Rng};

/// A set of masked feature indices, kept sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct Mask {
    members: Vec<usize>,
}

impl Mask {
    pub fn empty() -> Self {
        Mask::default()
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut members: Vec<usize> = indices.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        Mask { members }
    }

    pub fn all(n: usize) -> Self {
        Mask { members: (0..n).collect() }
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Mask { members: flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect() }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.members.binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.members
    }

    pub fn max_index(&self) -> Option<usize> {
        self.members.last().copied()
    }

    pub fn to_flags(&self, n: usize) -> Vec<bool> {
        let mut f = vec![false; n];
        for &j in &self.members {
            f[j] = true;
        }
        f
    }

    pub fn is_subset(&self, other: &Mask) -> bool {
        self.members.iter().all(|&j| other.contains(j))
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask::from_indices(self.iter().chain(other.iter()))
    }

    pub fn difference(&self, other: &Mask) -> Mask {
        Mask { members: self.iter().filter(|&j| !other.contains(j)).collect() }
    }

    /// Indices in `[0, n)` that are not masked.
    pub fn complement(&self, n: usize) -> Vec<usize> {
        let flags = self.to_flags(n);
        (0..n).filter(|&j| !flags[j]).collect()
    }
}

/// Round-half-up of `fraction · n`.
pub fn target_size(fraction: f64, n: usize) -> usize {
    let t = libm::floor(fraction * n as f64 + 0.5);
    (t.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Exactly `round(p·n)` features, uniformly without replacement.
    FixedFraction { p: f64 },
    /// Fraction drawn uniformly from `[lo, hi]` on every call.
    UniformFraction { lo: f64, hi: f64 },
    /// Every layer masked in full with probability `q`, independently.
    LayerSubset { q: f64 },
}

/// A validated masking distribution plus its seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    kind: MaskKind,
    seed: u64,
}

impl MaskPolicy {
    pub fn new(kind: MaskKind, seed: u64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        match kind {
            MaskKind::FixedFraction { p } if !in_unit(p) => {
                return Err(config_err!("fixed_fraction p={p} outside [0, 1)"))
            }
            MaskKind::UniformFraction { lo, hi } if !(in_unit(lo) && in_unit(hi) && lo <= hi) => {
                return Err(config_err!("uniform_fraction bounds [{lo}, {hi}] must satisfy 0 <= lo <= hi < 1"))
            }
            // q = 1 masks every layer on every draw, and that outcome is always resampled.
            MaskKind::LayerSubset { q } if !(0.0..1.0).contains(&q) => {
                return Err(config_err!("layer_subset q={q} must lie in [0, 1); q=1 never yields a usable mask"))
            }
            _ => {}
        }
        Ok(MaskPolicy { kind, seed })
    }

    pub fn fixed(p: f64, seed: u64) -> Result<Self> {
        Self::new(MaskKind::FixedFraction { p }, seed)
    }

    /// Uniform fraction over the default `[0, 0.99]` range.
    pub fn uniform(seed: u64) -> Result<Self> {
        Self::new(MaskKind::UniformFraction { lo: 0.0, hi: 0.99 }, seed)
    }

    pub fn layer_subset(q: f64, seed: u64) -> Result<Self> {
        Self::new(MaskKind::LayerSubset { q }, seed)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(self, seed: u64) -> Self {
        MaskPolicy { seed, ..self }
    }

    /// Generator for worker `worker`; the first worker uses the seed itself.
    pub fn rng(&self, worker: u64) -> Rng {
        rng::seeded(self.seed.wrapping_add(worker))
    }

    fn draw_size(&self, n: usize, rng: &mut Rng) -> usize {
        match self.kind {
            MaskKind::FixedFraction { p } => target_size(p, n),
            MaskKind::UniformFraction { lo, hi } => {
                let f = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                // keep at least one feature visible
                target_size(f, n).min(n.saturating_sub(1))
            }
            MaskKind::LayerSubset { .. } => unreachable!("layer masks have no size target"),
        }
    }

    fn draw_layers(&self, q: f64, partition: &LayerPartition, rng: &mut Rng) -> Vec<usize> {
        loop {
            let chosen: Vec<usize> =
                (0..partition.len()).filter(|_| q > 0.0 && rng.gen_bool(q)).collect();
            if chosen.len() < partition.len() || partition.is_empty() {
                return chosen;
            }
        }
    }

    /// Draws a mask over `n` features.
    pub fn sample(&self, n: usize, partition: &LayerPartition, rng: &mut Rng) -> Mask {
        match self.kind {
            MaskKind::LayerSubset { q } => {
                let layers = self.draw_layers(q, partition, rng);
                Mask::from_indices(layers.into_iter().flat_map(|l| partition.layers()[l].range()))
            }
            _ => {
                let size = self.draw_size(n, rng);
                Mask::from_indices(index::sample(rng, n, size))
            }
        }
    }

    /// Draws `Mᵢ ⊇ base`: extra members come uniformly from the complement of
    /// `base` until the policy's target size is reached. Layer policies add
    /// whole layers to `base`.
    pub fn sample_superset(
        &self,
        base: &Mask,
        n: usize,
        partition: &LayerPartition,
        rng: &mut Rng,
    ) -> Result<Mask> {
        if base.max_index().is_some_and(|j| j >= n) {
            return Err(Error::Internal(alloc::format!("base mask index out of range for n={n}")));
        }
        if base.len() >= n && n > 0 {
            return Err(Error::Policy("base mask already covers every feature".into()));
        }
        match self.kind {
            MaskKind::LayerSubset { q } => loop {
                let layers = self.draw_layers(q, partition, rng);
                let m = base.union(&Mask::from_indices(
                    layers.into_iter().flat_map(|l| partition.layers()[l].range()),
                ));
                if m.len() < n {
                    return Ok(m);
                }
            },
            MaskKind::FixedFraction { .. } => {
                let target = self.draw_size(n, rng);
                if target < base.len() {
                    return Err(Error::Policy(alloc::format!(
                        "ensemble fraction below given-mask fraction: target {target} < |base| {}",
                        base.len()
                    )));
                }
                Ok(extend_mask(base, target, n, rng))
            }
            MaskKind::UniformFraction { .. } => {
                let target = self.draw_size(n, rng).max(base.len());
                Ok(extend_mask(base, target, n, rng))
            }
        }
    }
}

fn extend_mask(base: &Mask, target: usize, n: usize, rng: &mut Rng) -> Mask {
    let free = base.complement(n);
    let extra = target - base.len();
    let picked = index::sample(rng, free.len(), extra);
    base.union(&Mask::from_indices(picked.into_iter().map(|i| free[i])))
}

/// `fⱼ = xⱼ` for unmasked `j`, `fⱼ = meansⱼ` for masked `j`.
pub fn apply_mask(x: &[f64], mask: &Mask, means: &FeatureMeans) -> Result<Vec<f64>> {
    let mut f = x.to_vec();
    apply_mask_in_place(&mut f, mask, means)?;
    Ok(f)
}

pub fn apply_mask_in_place(x: &mut [f64], mask: &Mask, means: &FeatureMeans) -> Result<()> {
    if x.len() != means.len() {
        return Err(Error::Internal(alloc::format!(
            "vector of length {} vs {} means",
            x.len(),
            means.len()
        )));
    }
    if mask.max_index().is_some_and(|j| j >= x.len()) {
        return Err(Error::Internal("mask index out of range".into()));
    }
    for j in mask.iter() {
        x[j] = means.means[j];
    }
    Ok(())
}

/// Indices holding NaN in `x` (missing measurements).
pub fn missing_mask(x: &[f64]) -> Mask {
    Mask { members: x.iter().enumerate().filter(|(_, v)| v.is_nan()).map(|(j, _)| j).collect() }
}
