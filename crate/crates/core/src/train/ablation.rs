//! One configuration per recipe ablation.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::datapipe::{MosaicConfig, PromptMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub name: String,
    pub config: TrainConfig,
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
}

/// Single-image probability one, other grid sizes kept at zero.
fn no_mosaic(base: &TrainConfig) -> MosaicConfig {
    MosaicConfig {
        probabilities: one_hot(base.augment.mosaic.probabilities.len().max(1), 0),
    }
}

/// Rows 1–15 of the recipe ablation, each a copy of `base` with one change.
///
/// Source 0 is the primary detection source and the last source the
/// secondary one (ratios 0.7/0.3 by default).
pub fn ablation_matrix(base: &TrainConfig) -> Vec<AblationRow> {
    let n = base.augment.dataset_ratios.len().max(1);
    let variant = |row: usize, name: &str, edit: &dyn Fn(&mut TrainConfig)| {
        let mut config = base.clone();
        edit(&mut config);
        AblationRow {
            row,
            name: name.to_string(),
            config,
        }
    };
    vec![
        variant(1, "only the secondary source", &|c| {
            c.augment.dataset_ratios = one_hot(n, n - 1)
        }),
        variant(2, "only the primary source", &|c| {
            c.augment.dataset_ratios = one_hot(n, 0)
        }),
        variant(3, "same LR for image and text encoders", &|c| {
            c.text_lr_ratio = 1.0
        }),
        variant(4, "no prompt ensembling at inference", &|c| {
            c.augment.eval_prompts = PromptMode::Single
        }),
        variant(5, "no prompts (train or inference)", &|c| {
            c.augment.train_prompts = PromptMode::None;
            c.augment.eval_prompts = PromptMode::None;
        }),
        variant(6, "no random negatives", &|c| {
            c.augment.pseudo_negatives = false
        }),
        variant(7, "no mosaics", &|c| c.augment.mosaic = no_mosaic(base)),
        variant(8, "no mosaics, train 2x longer", &|c| {
            c.augment.mosaic = no_mosaic(base);
            c.steps *= 2;
        }),
        variant(9, "no mosaics, train 3x longer", &|c| {
            c.augment.mosaic = no_mosaic(base);
            c.steps *= 3;
        }),
        variant(10, "do not merge overlapping instances", &|c| {
            c.augment.merge_instances = false
        }),
        variant(11, "no location bias in box predictor", &|c| {
            c.location_bias = false
        }),
        variant(12, "do not filter out any cropped boxes", &|c| {
            c.augment.crop.min_retention = 0.0
        }),
        variant(13, "filter out all cropped boxes", &|c| {
            c.augment.crop.min_retention = 1.0
        }),
        variant(14, "do not remove crowd instances", &|c| {
            c.augment.drop_crowd = false
        }),
        variant(15, "do not remove held-out labels", &|c| {
            c.augment.keep_held_out = true
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_single_changes() {
        let base = TrainConfig::default();
        let rows = ablation_matrix(&base);
        assert_eq!(rows.len(), 15);
        assert_eq!(
            rows.iter().map(|r| r.row).collect::<Vec<_>>(),
            (1..=15).collect::<Vec<_>>()
        );
        assert!(rows
            .iter()
            .all(|r| r.config != base && r.config.validate().is_ok()));
        assert_eq!(
            rows[6].config.augment.mosaic.probabilities,
            vec![1.0, 0.0, 0.0]
        );
        assert!(!rows[10].config.location_bias);
        assert_eq!(rows[8].config.steps, 3 * base.steps);
        assert_eq!(rows[0].config.augment.dataset_ratios, vec![0.0, 1.0]);
        assert_eq!(rows[1].config.augment.dataset_ratios, vec![1.0, 0.0]);
    }
}
