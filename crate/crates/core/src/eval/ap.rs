//! Greedy-matched, 101-point interpolated average precision.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};

/// One predicted box for one category on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: usize,
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

/// One ground-truth box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image: usize,
    pub category: String,
    pub bbox: BBox,
}

/// Precision/recall after each detection of one category, in score order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

pub const RECALL_POINTS: usize = 101;

/// Mean over recall levels `0, 0.01, …, 1` of the best precision reached at
/// that recall or beyond (zero where the recall is never reached).
pub fn interpolated_ap(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < n && curve.recall[k] < level {
            k += 1;
        }
        if k < n {
            total += envelope[k];
        }
    }
    total / RECALL_POINTS as f64
}

/// Matches one category's detections (highest score first, input order on
/// ties) to unmatched ground truth of the same image with the largest IoU
/// `≥ iou_thr`.
pub fn pr_curve(dets: &[&ScoredBox], gts: &[&GtBox], iou_thr: f64) -> PrCurve {
    let mut by_image: HashMap<usize, Vec<(BBox, bool)>> = HashMap::new();
    for g in gts {
        by_image.entry(g.image).or_default().push((g.bbox, false));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut curve = PrCurve::default();
    for (rank, &d) in order.iter().enumerate() {
        let det = dets[d];
        if let Some(cands) = by_image.get_mut(&det.image) {
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let v = iou(&det.bbox, b);
                if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                cands[j].1 = true;
                tp += 1;
            }
        }
        curve.recall.push(tp as f64 / n_gt);
        curve.precision.push(tp as f64 / (rank + 1) as f64);
    }
    curve
}

/// AP per category at one IoU threshold. Categories without ground truth
/// are skipped.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_thr: f64) -> BTreeMap<String, f64> {
    curves(dets, gts, iou_thr)
        .into_iter()
        .map(|(c, curve)| (c, interpolated_ap(&curve)))
        .collect()
}

/// PR curve per category with ground truth.
pub fn curves(dets: &[ScoredBox], gts: &[GtBox], iou_thr: f64) -> BTreeMap<String, PrCurve> {
    let mut g_by: BTreeMap<&str, Vec<&GtBox>> = BTreeMap::new();
    for g in gts {
        g_by.entry(&g.category).or_default().push(g);
    }
    let mut d_by: HashMap<&str, Vec<&ScoredBox>> = HashMap::new();
    for d in dets {
        d_by.entry(&d.category).or_default().push(d);
    }
    g_by.into_iter()
        .map(|(c, g)| {
            let d = d_by.get(c).map(Vec::as_slice).unwrap_or(&[]);
            (c.to_string(), pr_curve(d, &g, iou_thr))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(image: usize, b: BBox) -> GtBox {
        GtBox {
            image,
            category: "a".into(),
            bbox: b,
        }
    }

    fn det(image: usize, b: BBox, score: f64) -> ScoredBox {
        ScoredBox {
            image,
            category: "a".into(),
            bbox: b,
            score,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let gts = vec![gt(0, b1), gt(1, b2)];
        let dets = vec![det(0, b1, 0.9), det(1, b2, 0.8)];
        assert_eq!(average_precision(&dets, &gts, 0.5)["a"], 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5)["a"], 0.0);
        assert!(average_precision(&dets, &[], 0.5).is_empty());
    }

    #[test]
    fn duplicates_count_once() {
        let b = BBox::new(0.5, 0.5, 0.4, 0.4);
        let gts = vec![gt(0, b)];
        let dets = vec![det(0, b, 0.9), det(0, b, 0.8), det(0, b, 0.7)];
        let c = &curves(&dets, &gts, 0.5)["a"];
        assert_eq!(c.recall, vec![1.0, 1.0, 1.0]);
        assert_eq!(c.precision, vec![1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(average_precision(&dets, &gts, 0.5)["a"], 1.0);
    }

    #[test]
    fn false_positive_first() {
        let b = BBox::new(0.5, 0.5, 0.4, 0.4);
        let far = BBox::new(0.1, 0.1, 0.1, 0.1);
        let gts = vec![gt(0, b)];
        let dets = vec![det(0, far, 0.9), det(0, b, 0.8)];
        // Recall 1 is first reached at precision 1/2.
        assert!((average_precision(&dets, &gts, 0.5)["a"] - 0.5).abs() < 1e-15);
    }
}
