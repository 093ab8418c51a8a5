//! Category frequencies, pseudo-negative sampling and dataset mixing.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FederatedExample;
use crate::error::{Error, Result};

pub const MIN_NEGATIVES: usize = 50;

/// Independent generator for example `index` under `seed`, so examples can
/// be prepared in any order with identical results.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Relative frequency of each category among instance labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryFrequencyTable {
    freqs: BTreeMap<String, f64>,
}

impl CategoryFrequencyTable {
    /// Counts instance labels; categories that only ever appear as
    /// positives or negatives without an instance get frequency zero.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a FederatedExample>) -> Self {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for ex in examples {
            for c in ex.annotated() {
                counts.entry(c.clone()).or_insert(0.0);
            }
            for l in ex.instances.iter().flat_map(|i| &i.labels) {
                *counts.entry(l.clone()).or_insert(0.0) += 1.0;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(mut counts: BTreeMap<String, f64>) -> Self {
        let total: f64 = counts.values().sum();
        if total > 0.0 {
            counts.values_mut().for_each(|v| *v /= total);
        }
        Self { freqs: counts }
    }

    pub fn frequency(&self, category: &str) -> f64 {
        self.freqs.get(category).copied().unwrap_or(0.0)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.freqs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Extra negatives for `ex`, drawn without replacement in proportion to
/// frequency from categories that are neither positive nor already
/// negative, until the image has `min_total` negatives or the supply runs out.
pub fn sample_pseudo_negatives(
    ex: &FederatedExample,
    ft: &CategoryFrequencyTable,
    min_total: usize,
    rng: &mut impl Rng,
) -> Vec<String> {
    let need = min_total.saturating_sub(ex.negative.len());
    if need == 0 {
        return Vec::new();
    }
    let pool: Vec<(&String, f64)> = ft
        .freqs
        .iter()
        .filter(|(c, &f)| f > 0.0 && !ex.positive.contains(*c) && !ex.negative.contains(*c))
        .map(|(c, &f)| (c, f))
        .collect();
    let take = need.min(pool.len());
    let mut out: Vec<String> = pool
        .choose_multiple_weighted(rng, take, |(_, f)| *f)
        .expect("weights are positive and finite")
        .map(|(c, _)| (*c).clone())
        .collect();
    out.sort();
    out
}

/// Infinite interleaving of several sources. Each draw picks a source with
/// its configured probability, then the next item of that source's current
/// epoch; every source reshuffles at the start of each of its epochs.
#[derive(Clone, Debug)]
pub struct DatasetMixer {
    sizes: Vec<usize>,
    pick: WeightedIndex<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl DatasetMixer {
    pub fn new(sizes: &[usize], ratios: &[f64], seed: u64) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != ratios.len() {
            return Err(Error::config("need one ratio per source"));
        }
        if sizes.contains(&0) {
            return Err(Error::Empty("mixed source"));
        }
        let sum: f64 = ratios.iter().sum();
        if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mixing ratios {ratios:?} must be non-negative and sum to 1"
            )));
        }
        let pick =
            WeightedIndex::new(ratios).map_err(|e| Error::config(format!("mixing ratios: {e}")))?;
        Ok(Self {
            sizes: sizes.to_vec(),
            pick,
            orders: sizes.iter().map(|&n| (0..n).collect()).collect(),
            cursors: vec![usize::MAX; sizes.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `(source, index within source)`.
    pub fn next_index(&mut self) -> (usize, usize) {
        let s = self.pick.sample(&mut self.rng);
        if self.cursors[s] >= self.sizes[s] {
            self.orders[s].shuffle(&mut self.rng);
            self.cursors[s] = 0;
        }
        let i = self.orders[s][self.cursors[s]];
        self.cursors[s] += 1;
        (s, i)
    }
}

impl Iterator for DatasetMixer {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_index())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::datapipe::Instance;
    use crate::imaging::Image;
    use std::collections::BTreeSet;

    fn example(pos: &[&str], neg: &[&str]) -> FederatedExample {
        FederatedExample {
            image: Image::filled(4, 4, 3, 0.0),
            instances: pos
                .iter()
                .map(|p| Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), [*p]))
                .collect(),
            positive: pos.iter().map(|s| s.to_string()).collect(),
            negative: neg.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn uniform_table(n: usize) -> CategoryFrequencyTable {
        CategoryFrequencyTable::from_counts((0..n).map(|i| (format!("c{i:03}"), 1.0)).collect())
    }

    #[test]
    fn frequencies_sum_to_one() {
        let exs = [example(&["a", "b"], &["z"]), example(&["a"], &[])];
        let ft = CategoryFrequencyTable::from_examples(&exs);
        assert!((ft.frequency("a") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ft.frequency("z"), 0.0);
        let total: f64 = ft.categories().map(|c| ft.frequency(c)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tops_up_to_fifty() {
        let ft = uniform_table(200);
        let ex = example(&["c000"], &["c001", "c002", "c003"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = sample_pseudo_negatives(&ex, &ft, MIN_NEGATIVES, &mut rng);
        assert_eq!(got.len(), 47);
        let uniq: BTreeSet<&String> = got.iter().collect();
        assert_eq!(uniq.len(), 47);
        assert!(got
            .iter()
            .all(|c| !ex.positive.contains(c) && !ex.negative.contains(c)));
    }

    #[test]
    fn exhausted_vocabulary() {
        let ft = CategoryFrequencyTable::from_counts([("a".to_string(), 1.0)].into());
        let ex = example(&["a"], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_pseudo_negatives(&ex, &ft, 50, &mut rng).is_empty());
    }

    #[test]
    fn zero_frequency_never_sampled() {
        let counts = [
            ("a".to_string(), 0.0),
            ("b".to_string(), 3.0),
            ("c".to_string(), 1.0),
        ]
        .into();
        let ft = CategoryFrequencyTable::from_counts(counts);
        let ex = example(&[], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let got = sample_pseudo_negatives(&ex, &ft, 50, &mut rng);
            assert_eq!(got, vec!["b".to_string(), "c".to_string()]);
        }
    }

    #[test]
    fn single_draw_follows_frequency() {
        let counts = [("a".to_string(), 3.0), ("b".to_string(), 1.0)].into();
        let ft = CategoryFrequencyTable::from_counts(counts);
        let ex = example(&[], &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let a = (0..n)
            .filter(|_| sample_pseudo_negatives(&ex, &ft, 1, &mut rng) == ["a"])
            .count();
        assert!((a as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn mixer_ratio_and_determinism() {
        let mut m = DatasetMixer::new(&[5, 7], &[0.7, 0.3], 11).unwrap();
        let n = 100_000;
        let draws: Vec<(usize, usize)> = m.by_ref().take(n).collect();
        let a = draws.iter().filter(|d| d.0 == 0).count() as f64 / n as f64;
        assert!((a - 0.7).abs() < 0.01);
        let again: Vec<(usize, usize)> = DatasetMixer::new(&[5, 7], &[0.7, 0.3], 11)
            .unwrap()
            .take(n)
            .collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn mixer_epochs_cover_every_item() {
        let mut m = DatasetMixer::new(&[6, 3], &[1.0, 0.0], 0).unwrap();
        let first: Vec<usize> = (0..6)
            .map(|_| m.next_index())
            .map(|(s, i)| {
                assert_eq!(s, 0);
                i
            })
            .collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn mixer_errors() {
        assert!(DatasetMixer::new(&[0, 3], &[0.5, 0.5], 0).is_err());
        assert!(DatasetMixer::new(&[2, 3], &[0.5, 0.6], 0).is_err());
        assert!(DatasetMixer::new(&[2], &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn example_rngs_are_independent_of_order() {
        let a: u64 = example_rng(1, 5).random();
        let _ = example_rng(1, 4).random::<u64>();
        assert_eq!(a, example_rng(1, 5).random::<u64>());
        assert_ne!(a, example_rng(1, 6).random::<u64>());
    }
}
