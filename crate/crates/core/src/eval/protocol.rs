//! Dataset-level evaluation: federated AP, zero-shot splits and one-shot querying.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::{curves, interpolated_ap, GtBox, PrCurve, ScoredBox};
use crate::datapipe::{FederatedExample, PromptMode, PromptTemplates};
use crate::error::{Error, Result};
use crate::head::DetectionOutput;
use crate::model::{rank_in_image_frame, Model};
use crate::query::{
    embed_text_queries, fewshot_from_patches, select_query_token, ImageQuery, QueryEntry,
    QueryOrigin, QuerySet, FALLBACK_QUERY, QUERY_IOU,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per image, over all queries.
    pub max_detections: usize,
    pub per_category: bool,
    pub prompt_mode: PromptMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: 100,
            per_category: true,
            prompt_mode: PromptMode::Eval,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty()
            || t.iter().any(|v| !(*v > 0.0 && *v <= 1.0))
            || t.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(
                "IoU thresholds must be sorted, distinct and in (0, 1]",
            ));
        }
        if !t.iter().any(|v| (v - 0.5).abs() < 1e-12) {
            return Err(Error::config("IoU thresholds must include 0.5"));
        }
        if self.max_detections == 0 {
            return Err(Error::config("max_detections must be positive"));
        }
        Ok(())
    }
}

/// Labels removed from detection training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub held_out: BTreeSet<String>,
}

impl SplitSpec {
    pub fn new(held_out: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            held_out: held_out.into_iter().map(Into::into).collect(),
        }
    }

    /// Partitions `categories` into `n` disjoint splits, round robin.
    pub fn disjoint_splits(categories: &[String], n: usize) -> Vec<SplitSpec> {
        (0..n)
            .map(|s| SplitSpec::new(categories.iter().skip(s).step_by(n.max(1)).cloned()))
            .collect()
    }
}

/// Drops every annotation with a held-out label. Images stay; held-out
/// labels leave both the positive and the negative sets.
pub fn remove_labels(ex: &FederatedExample, held_out: &BTreeSet<String>) -> FederatedExample {
    FederatedExample {
        image: ex.image.clone(),
        instances: ex
            .instances
            .iter()
            .filter(|i| i.labels.is_disjoint(held_out))
            .cloned()
            .collect(),
        positive: ex.positive.difference(held_out).cloned().collect(),
        negative: ex.negative.difference(held_out).cloned().collect(),
    }
}

/// `(training view, evaluation view)`; the evaluation view is untouched.
pub fn zero_shot_split(
    dataset: &[FederatedExample],
    ss: &SplitSpec,
) -> (Vec<FederatedExample>, Vec<FederatedExample>) {
    let train = dataset
        .iter()
        .map(|e| remove_labels(e, &ss.held_out))
        .collect();
    (train, dataset.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub held_out: bool,
    pub n_gt: usize,
    pub ap: f64,
    pub ap50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over IoU thresholds and categories.
    pub ap: f64,
    pub ap50: f64,
    /// Means over held-out categories only; `None` without any.
    pub ap_heldout: Option<f64>,
    pub ap50_heldout: Option<f64>,
    pub per_category: Vec<CategoryRow>,
    #[serde(skip)]
    pub curves50: BTreeMap<String, PrCurve>,
}

impl EvalReport {
    /// `category,iou,recall,precision` rows of the IoU 0.5 curves.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("category,iou,recall,precision\n");
        for (c, curve) in &self.curves50 {
            for (r, p) in curve.recall.iter().zip(&curve.precision) {
                let _ = writeln!(s, "{},0.5,{r},{p}", csv_field(c));
            }
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Scores detections against ground truth, keeping a category's detections
/// on an image only when that image annotates the category.
pub fn score_detections(
    examples: &[FederatedExample],
    dets: &[ScoredBox],
    held_out: &BTreeSet<String>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let dets: Vec<ScoredBox> = dets
        .iter()
        .filter(|d| {
            let ex = &examples[d.image];
            ex.positive.contains(&d.category) || ex.negative.contains(&d.category)
        })
        .cloned()
        .collect();
    let gts: Vec<GtBox> = examples
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            ex.instances.iter().flat_map(move |inst| {
                inst.labels.iter().map(move |l| GtBox {
                    image: i,
                    category: l.clone(),
                    bbox: inst.bbox,
                })
            })
        })
        .collect();
    let mut per_thr: Vec<BTreeMap<String, f64>> = Vec::new();
    let mut curves50 = BTreeMap::new();
    for &t in &cfg.iou_thresholds {
        let c = curves(&dets, &gts, t);
        per_thr.push(
            c.iter()
                .map(|(k, v)| (k.clone(), interpolated_ap(v)))
                .collect(),
        );
        if (t - 0.5).abs() < 1e-12 {
            curves50 = c;
        }
    }
    let i50 = cfg
        .iou_thresholds
        .iter()
        .position(|t| (t - 0.5).abs() < 1e-12)
        .expect("validated");
    let mut n_gt: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &gts {
        *n_gt.entry(&g.category).or_default() += 1;
    }
    let rows: Vec<CategoryRow> = per_thr[i50]
        .keys()
        .map(|c| CategoryRow {
            category: c.clone(),
            held_out: held_out.contains(c),
            n_gt: n_gt[c.as_str()],
            ap: mean(per_thr.iter().map(|m| m[c])).unwrap_or(0.0),
            ap50: per_thr[i50][c],
        })
        .collect();
    Ok(EvalReport {
        ap: mean(rows.iter().map(|r| r.ap)).unwrap_or(0.0),
        ap50: mean(rows.iter().map(|r| r.ap50)).unwrap_or(0.0),
        ap_heldout: mean(rows.iter().filter(|r| r.held_out).map(|r| r.ap)),
        ap50_heldout: mean(rows.iter().filter(|r| r.held_out).map(|r| r.ap50)),
        per_category: if cfg.per_category { rows } else { Vec::new() },
        curves50,
    })
}

/// Text-queried detection over `examples` with every category in `categories`.
pub fn evaluate(
    model: &Model,
    examples: &[FederatedExample],
    categories: &[String],
    held_out: &BTreeSet<String>,
    templates: &PromptTemplates,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let queries = embed_text_queries(model, categories, cfg.prompt_mode, templates, &mut rng)?;
    let dets = detect_all(model, examples, &queries, cfg.max_detections)?;
    score_detections(examples, &dets, held_out, cfg)
}

pub fn detect_all(
    model: &Model,
    examples: &[FederatedExample],
    queries: &QuerySet,
    top_k: usize,
) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        for d in model.detect(&ex.image, queries, top_k, 0.0)? {
            out.push(ScoredBox {
                image: i,
                category: queries.entries()[d.query_index].name.clone(),
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotConfig {
    pub shots: usize,
    pub seeds: Vec<u64>,
    /// Draw query patches from the target image itself.
    pub from_target: bool,
    pub max_detections: usize,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            seeds: vec![0, 1, 2],
            from_target: false,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub shots: usize,
    /// Mean over categories, one value per seed.
    pub ap50_per_seed: Vec<f64>,
    pub ap50: f64,
    pub per_category: BTreeMap<String, f64>,
    /// Fraction of query patches that fell back to the generic text query.
    pub fallback_rate: f64,
}

/// Image-conditioned detection of each category in `ss.held_out`.
///
/// For every evaluation image containing a category, `shots` example boxes
/// of that category are drawn from other images, their extracted
/// embeddings averaged into one query, and the image searched with it.
/// AP50 is computed per category over those images and averaged.
pub fn one_shot_protocol(
    model: &Model,
    examples: &[FederatedExample],
    ss: &SplitSpec,
    cfg: &OneShotConfig,
) -> Result<OneShotReport> {
    if cfg.shots == 0 || cfg.seeds.is_empty() {
        return Err(Error::config(
            "one-shot evaluation needs shots ≥ 1 and at least one seed",
        ));
    }
    let outputs: Vec<DetectionOutput> = examples
        .iter()
        .map(|e| model.analyze(&e.image))
        .collect::<Result<_>>()?;
    let fallback = model.embed_texts(&[FALLBACK_QUERY])?.row(0).to_vec();
    let mut per_seed = Vec::new();
    let mut per_cat_sum: BTreeMap<String, f64> = BTreeMap::new();
    let (mut patches, mut fallbacks) = (0usize, 0usize);
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cat_ap = Vec::new();
        for cat in &ss.held_out {
            let holders: Vec<(usize, usize)> = examples
                .iter()
                .enumerate()
                .flat_map(|(i, e)| {
                    e.instances
                        .iter()
                        .enumerate()
                        .filter(|(_, inst)| inst.labels.contains(cat))
                        .map(move |(j, _)| (i, j))
                })
                .collect();
            let targets: BTreeSet<usize> = holders.iter().map(|h| h.0).collect();
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for &t in &targets {
                let pool: Vec<(usize, usize)> = holders
                    .iter()
                    .copied()
                    .filter(|h| (h.0 == t) == cfg.from_target)
                    .collect();
                if pool.is_empty() {
                    continue;
                }
                let mut embs = Vec::with_capacity(cfg.shots);
                for _ in 0..cfg.shots {
                    let &(i, j) = pool.choose(&mut rng).expect("pool is nonempty");
                    let ex = &examples[i];
                    let qb = ex.instances[j].bbox;
                    patches += 1;
                    embs.push(
                        match select_query_token(
                            &outputs[i],
                            ex.image.height,
                            ex.image.width,
                            qb,
                            QUERY_IOU,
                        ) {
                            Some((token, embedding)) => ImageQuery {
                                embedding,
                                fallback: false,
                                token: Some(token),
                            },
                            None => {
                                fallbacks += 1;
                                ImageQuery {
                                    embedding: fallback.clone(),
                                    fallback: true,
                                    token: None,
                                }
                            }
                        },
                    );
                }
                let query = fewshot_from_patches(&embs)?;
                let qs = QuerySet::new(vec![QueryEntry::single(
                    cat.clone(),
                    QueryOrigin::Image,
                    query,
                )])?;
                let ex = &examples[t];
                for d in rank_in_image_frame(
                    &outputs[t],
                    ex.image.height,
                    ex.image.width,
                    &qs,
                    cfg.max_detections,
                    0.0,
                )? {
                    dets.push(ScoredBox {
                        image: t,
                        category: cat.clone(),
                        bbox: d.bbox,
                        score: d.score,
                    });
                }
                for inst in ex.instances.iter().filter(|i| i.labels.contains(cat)) {
                    gts.push(GtBox {
                        image: t,
                        category: cat.clone(),
                        bbox: inst.bbox,
                    });
                }
            }
            if gts.is_empty() {
                continue;
            }
            let ap = curves(&dets, &gts, 0.5)
                .get(cat)
                .map(interpolated_ap)
                .unwrap_or(0.0);
            *per_cat_sum.entry(cat.clone()).or_default() += ap / cfg.seeds.len() as f64;
            cat_ap.push(ap);
        }
        per_seed.push(
            mean(cat_ap.into_iter()).ok_or(Error::Empty("one-shot categories with targets"))?,
        );
    }
    Ok(OneShotReport {
        shots: cfg.shots,
        ap50: mean(per_seed.iter().copied()).unwrap_or(0.0),
        ap50_per_seed: per_seed,
        per_category: per_cat_sum,
        fallback_rate: if patches == 0 {
            0.0
        } else {
            fallbacks as f64 / patches as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::datapipe::Instance;
    use crate::imaging::Image;

    fn ex(instances: Vec<Instance>, neg: &[&str]) -> FederatedExample {
        FederatedExample {
            image: Image::filled(8, 8, 3, 0.0),
            positive: instances
                .iter()
                .flat_map(|i| i.labels.iter().cloned())
                .collect(),
            instances,
            negative: neg.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn empty_split_is_identity() {
        let d = vec![ex(
            vec![Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["a"])],
            &["b"],
        )];
        let (train, eval) = zero_shot_split(&d, &SplitSpec::default());
        assert_eq!(train, d);
        assert_eq!(eval, d);
    }

    #[test]
    fn held_out_only_instance() {
        let d = vec![ex(
            vec![Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["a"])],
            &["b"],
        )];
        let (train, eval) = zero_shot_split(&d, &SplitSpec::new(["a"]));
        assert_eq!(train.len(), 1);
        assert!(train[0].instances.is_empty() && train[0].positive.is_empty());
        train[0].validate().unwrap();
        assert_eq!(eval, d);
    }

    #[test]
    fn federated_filter_and_heldout_mean() {
        let b = BBox::new(0.5, 0.5, 0.4, 0.4);
        let d = vec![
            ex(vec![Instance::new(b, ["a"])], &["b"]),
            ex(vec![Instance::new(b, ["b"])], &[]),
        ];
        let far = BBox::new(0.1, 0.1, 0.1, 0.1);
        let dets = vec![
            ScoredBox {
                image: 0,
                category: "a".into(),
                bbox: b,
                score: 0.9,
            },
            ScoredBox {
                image: 1,
                category: "b".into(),
                bbox: b,
                score: 0.5,
            },
            // Image 1 does not annotate "a": ignored instead of a false positive.
            ScoredBox {
                image: 1,
                category: "a".into(),
                bbox: far,
                score: 0.99,
            },
            // Image 0 lists "b" as negative: a false positive ranked first.
            ScoredBox {
                image: 0,
                category: "b".into(),
                bbox: far,
                score: 0.8,
            },
        ];
        let cfg = EvalConfig::default();
        let r = score_detections(&d, &dets, &["b".to_string()].into(), &cfg).unwrap();
        let a = r.per_category.iter().find(|c| c.category == "a").unwrap();
        let bb = r.per_category.iter().find(|c| c.category == "b").unwrap();
        assert_eq!(a.ap50, 1.0);
        assert!((bb.ap50 - 0.5).abs() < 1e-15);
        assert_eq!(r.ap50_heldout, Some(bb.ap50));
        assert!(r
            .pr_csv()
            .starts_with("category,iou,recall,precision\na,0.5,1,1\n"));
    }

    #[test]
    fn disjoint_splits_partition() {
        let cats: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let splits = SplitSpec::disjoint_splits(&cats, 4);
        let all: BTreeSet<String> = splits
            .iter()
            .flat_map(|s| s.held_out.iter().cloned())
            .collect();
        assert_eq!(all.len(), 10);
        assert_eq!(splits.iter().map(|s| s.held_out.len()).sum::<usize>(), 10);
    }
}
