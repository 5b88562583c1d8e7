//! Masking contracts as properties.

use mrmae_core::dataset::LayerPartition;
use mrmae_core::masking::{target_size, Mask, MaskPolicy};
use mrmae_core::rng;
use proptest::prelude::*;

fn partition_from(sizes: &[usize]) -> LayerPartition {
    LayerPartition::new(sizes.iter().enumerate().map(|(i, &s)| (format!("l{i}"), 1, s)))
}

fn is_union_of_layers(mask: &Mask, partition: &LayerPartition) -> bool {
    partition.layers().iter().all(|l| {
        let inside = l.range().filter(|&j| mask.contains(j)).count();
        inside == 0 || inside == l.len()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn fixed_fraction_masks_have_the_exact_size(n in 1usize..80, p in 0.0f64..1.0, seed: u64, draw: u64) {
        let policy = MaskPolicy::fixed(p, seed).unwrap();
        let partition = LayerPartition::flat(&[n]);
        let m = policy.sample(n, &partition, &mut rng::derived(seed, &[draw]));
        prop_assert_eq!(m.len(), target_size(p, n));
        prop_assert!(m.iter().all(|j| j < n));
    }

    #[test]
    fn supersets_contain_the_base(
        n in 2usize..60,
        base_share in 0.0f64..0.9,
        p in 0.0f64..0.99,
        kind in 0u8..3,
        seed: u64,
    ) {
        let partition = partition_from(&[n / 2, n - n / 2]);
        let policy = match kind {
            0 => MaskPolicy::fixed(p.max(base_share), seed).unwrap(),
            1 => MaskPolicy::uniform(seed).unwrap(),
            _ => MaskPolicy::layer_subset(p.min(0.9), seed).unwrap(),
        };
        let mut r = rng::seeded(seed);
        let base = Mask::from_indices((0..n).filter(|j| (j * 7919 % n) < (base_share * n as f64) as usize).take(n - 1));
        let m = policy.sample_superset(&base, n, &partition, &mut r).unwrap();
        prop_assert!(base.is_subset(&m));
        if kind != 0 {
            prop_assert!(m.len() < n);
        }
        if let 0 = kind {
            prop_assert_eq!(m.len(), target_size(p.max(base_share), n).max(base.len()));
        }
    }

    #[test]
    fn layer_subset_masks_are_unions_of_whole_layers(
        sizes in prop::collection::vec(1usize..6, 1..6),
        q in 0.0f64..0.95,
        seed: u64,
    ) {
        let partition = partition_from(&sizes);
        let n = partition.n_features();
        let policy = MaskPolicy::layer_subset(q, seed).unwrap();
        let m = policy.sample(n, &partition, &mut rng::seeded(seed));
        prop_assert!(is_union_of_layers(&m, &partition));
        prop_assert!(m.len() < n || n == 0);
    }
}
