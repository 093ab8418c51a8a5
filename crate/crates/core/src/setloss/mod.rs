//! Bipartite-matching detection loss over per-image query spaces.

mod hungarian;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, BBox};
use crate::datapipe::Instance;
use crate::error::{Error, Result};
use crate::nn::{focal_value, Graph, Tensor, Var};

pub use hungarian::{assignment_cost, hungarian};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::config(
                "focal loss needs 0 < alpha < 1 and gamma >= 0",
            ));
        }
        Ok(())
    }
}

/// Focal sigmoid cross-entropy of one logit against a binary target.
pub fn focal_bce(logit: f64, target: f64, fp: FocalParams) -> f64 {
    focal_value(logit, target, fp.alpha, fp.gamma)
}

/// Ordered category list used as the classifier for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySpace {
    categories: Vec<String>,
    positive: Vec<bool>,
    index: HashMap<String, usize>,
}

impl QuerySpace {
    /// Positives first (sorted), then negatives and pseudo-negatives in the
    /// given order; later duplicates are dropped.
    pub fn new<'a>(
        positives: impl IntoIterator<Item = &'a String>,
        negatives: impl IntoIterator<Item = &'a String>,
    ) -> Self {
        let mut qs = Self {
            categories: Vec::new(),
            positive: Vec::new(),
            index: HashMap::new(),
        };
        let pos: BTreeSet<&String> = positives.into_iter().collect();
        for c in pos {
            qs.push(c, true);
        }
        for c in negatives {
            qs.push(c, false);
        }
        qs
    }

    fn push(&mut self, c: &str, positive: bool) {
        if !self.index.contains_key(c) {
            self.index.insert(c.to_string(), self.categories.len());
            self.categories.push(c.to_string());
            self.positive.push(positive);
        }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn is_positive(&self, q: usize) -> bool {
        self.positive[q]
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.index.get(category).copied()
    }

    pub fn n_negative(&self) -> usize {
        self.positive.iter().filter(|p| !**p).count()
    }
}

/// Multi-hot `[N x Q]` targets: `1` where the query names one of the instance's labels.
pub fn build_targets(instances: &[Instance], qs: &QuerySpace) -> Result<Tensor> {
    let q = qs.len();
    let mut t = Tensor::zeros(&[instances.len(), q]);
    for (i, inst) in instances.iter().enumerate() {
        for label in &inst.labels {
            let j = qs.index_of(label).ok_or_else(|| {
                Error::InvalidData(format!(
                    "instance label {label:?} missing from the query space"
                ))
            })?;
            t.set(i, j, 1.0);
        }
    }
    Ok(t)
}

fn l1(a: &BBox, b: &BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// `[N x T]` cost of assigning instance `i` to token `t`: mean focal loss of
/// the token's logits against the instance's targets, plus box L1, plus
/// `1 − gIoU`, all with unit weight.
pub fn matching_cost(
    logits: &Tensor,
    boxes: &[BBox],
    gt_boxes: &[BBox],
    targets: &Tensor,
    fp: FocalParams,
) -> Result<Tensor> {
    let (t, q) = (logits.rows(), logits.cols());
    let n = gt_boxes.len();
    if n > t {
        return Err(Error::config(format!("{n} instances exceed {t} tokens")));
    }
    if boxes.len() != t || targets.rows() != n || (n > 0 && targets.cols() != q) {
        return Err(Error::config("matching inputs disagree on sizes"));
    }
    // Per-token focal loss for each query under both target values.
    let mut pos = vec![0.0; t * q];
    let mut neg = vec![0.0; t * q];
    for k in 0..t {
        for j in 0..q {
            let x = logits.at(k, j);
            pos[k * q + j] = focal_bce(x, 1.0, fp);
            neg[k * q + j] = focal_bce(x, 0.0, fp);
        }
    }
    let inv_q = if q == 0 { 0.0 } else { 1.0 / q as f64 };
    let mut cost = Tensor::zeros(&[n, t]);
    for i in 0..n {
        let tr = targets.row(i);
        for k in 0..t {
            let mut cls = 0.0;
            for j in 0..q {
                cls += if tr[j] > 0.5 {
                    pos[k * q + j]
                } else {
                    neg[k * q + j]
                };
            }
            let c =
                cls * inv_q + l1(&boxes[k], &gt_boxes[i]) + (1.0 - giou(&boxes[k], &gt_boxes[i]));
            cost.set(i, k, c);
        }
    }
    Ok(cost)
}

/// Loss node and its detached components.
#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Token matched to each instance.
    pub assignment: Vec<usize>,
}

/// Bipartite-matching loss for one image.
///
/// `logits` is `[T x Q]` over `qs`, `boxes` is `[T x 4]` cxcywh. Matched
/// tokens are classified against their instance's labels, every other token
/// against all-negative targets. The classification sum is divided by
/// `|qs| · max(1, N)`, the box terms by `max(1, N)`.
pub fn detection_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    instances: &[Instance],
    qs: &QuerySpace,
    fp: FocalParams,
) -> Result<DetectionLoss> {
    let (t, q) = g.shape(logits);
    if q != qs.len() || g.shape(boxes) != (t, 4) {
        return Err(Error::config(
            "logit or box shape disagrees with the query space",
        ));
    }
    let targets = build_targets(instances, qs)?;
    let gt: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
    let pred: Vec<BBox> = (0..t)
        .map(|k| BBox::from_slice(g.value(boxes).row(k)))
        .collect();
    let cost = matching_cost(g.value(logits), &pred, &gt, &targets, fp)?;
    let assignment = hungarian(&cost)?;

    let n = instances.len();
    let norm = n.max(1) as f64;
    let mut cls_targets = Tensor::zeros(&[t, q]);
    for (i, &k) in assignment.iter().enumerate() {
        cls_targets.row_mut(k).copy_from_slice(targets.row(i));
    }
    let focal = g.focal_sum(logits, cls_targets, fp.alpha, fp.gamma);
    let cls = g.scale(focal, 1.0 / (q.max(1) as f64 * norm));
    let cls_v = g.value(cls).item();
    if n == 0 {
        return Ok(DetectionLoss {
            total: cls,
            cls: cls_v,
            l1: 0.0,
            giou: 0.0,
            assignment,
        });
    }
    let matched = g.gather_rows(boxes, &assignment);
    let gt_t = Tensor::from_rows(&gt.iter().map(|b| b.to_array().to_vec()).collect::<Vec<_>>());
    let l1 = g.l1_sum(matched, gt_t.clone());
    let l1 = g.scale(l1, 1.0 / norm);
    let gl = g.giou_loss_sum(matched, gt_t);
    let gl = g.scale(gl, 1.0 / norm);
    let (l1_v, giou_v) = (g.value(l1).item(), g.value(gl).item());
    let boxes_sum = g.add(l1, gl);
    let total = g.add(cls, boxes_sum);
    Ok(DetectionLoss {
        total,
        cls: cls_v,
        l1: l1_v,
        giou: giou_v,
        assignment,
    })
}
