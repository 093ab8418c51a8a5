//! Empirical laws of the training-data samplers.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovd_core::datapipe::{
    sample_mosaic_grid, sample_pseudo_negatives, CategoryFrequencyTable, DatasetMixer,
    FederatedExample, MosaicConfig, MIN_NEGATIVES,
};
use ovd_core::imaging::Image;

pub const DRAWS: usize = 100_000;

/// Observed `k x k` grid frequencies for `M = 3`.
pub fn mosaic_frequencies(seed: u64) -> Vec<f64> {
    let mc = MosaicConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; mc.max_grid()];
    for _ in 0..DRAWS {
        counts[sample_mosaic_grid(&mc, &mut rng).expect("valid config") - 1] += 1;
    }
    counts.iter().map(|&c| c as f64 / DRAWS as f64).collect()
}

/// Observed share of each source for a 0.7/0.3 mix.
pub fn mixer_frequencies(seed: u64) -> Vec<f64> {
    let mut mixer = DatasetMixer::new(&[37, 11], &[0.7, 0.3], seed).expect("valid ratios");
    let mut counts = [0usize; 2];
    for _ in 0..DRAWS {
        counts[mixer.next_index().0] += 1;
    }
    counts.iter().map(|&c| c as f64 / DRAWS as f64).collect()
}

pub struct PseudoNegativeReport {
    pub trials: usize,
    /// Trials whose negatives fell short of `min(50, available)`.
    pub short: usize,
    /// Trials that drew a positive or an already-negative category.
    pub invalid: usize,
}

/// Random vocabularies of 10 to 150 categories with random federated
/// annotations; each image must end with at least `min(50, available)`
/// negatives.
pub fn pseudo_negative_law(trials: usize, seed: u64) -> PseudoNegativeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut short, mut invalid) = (0, 0);
    for _ in 0..trials {
        let n_cats = rng.random_range(10..=150);
        let names: Vec<String> = (0..n_cats).map(|i| format!("c{i}")).collect();
        let mut counts = BTreeMap::new();
        for n in &names {
            if rng.random_bool(0.9) {
                counts.insert(n.clone(), f64::from(rng.random_range(1..100u32)));
            }
        }
        let ft = CategoryFrequencyTable::from_counts(counts.clone());
        let mut positive = BTreeSet::new();
        let mut negative = BTreeSet::new();
        for n in &names {
            match rng.random_range(0..10) {
                0 => {
                    positive.insert(n.clone());
                }
                1 => {
                    negative.insert(n.clone());
                }
                _ => {}
            }
        }
        let ex = FederatedExample {
            image: Image::filled(4, 4, 3, 0.5),
            instances: Vec::new(),
            positive,
            negative,
        };
        let extra = sample_pseudo_negatives(&ex, &ft, MIN_NEGATIVES, &mut rng);
        let available = counts
            .keys()
            .filter(|c| !ex.positive.contains(*c) && !ex.negative.contains(*c))
            .count();
        let want = MIN_NEGATIVES.min(ex.negative.len() + available);
        if ex.negative.len() + extra.len() < want {
            short += 1;
        }
        let distinct: BTreeSet<&String> = extra.iter().collect();
        if distinct.len() != extra.len()
            || extra
                .iter()
                .any(|c| ex.positive.contains(c) || ex.negative.contains(c))
        {
            invalid += 1;
        }
    }
    PseudoNegativeReport {
        trials,
        short,
        invalid,
    }
}
