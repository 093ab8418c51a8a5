//! Brute-force references for matching, box overlap, focal loss and AP.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovd_core::boxes::{giou, BBox};
use ovd_core::eval::{average_precision, GtBox, ScoredBox};
use ovd_core::nn::Tensor;
use ovd_core::setloss::{assignment_cost, focal_bce, hungarian, FocalParams};

/// Lexicographically first minimum-cost injective assignment, by enumeration.
pub fn brute_force_assignment(cost: &Tensor) -> (Vec<usize>, f64) {
    fn rec(
        cost: &Tensor,
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if row == cost.rows() {
            let c = assignment_cost(cost, cur);
            if best.as_ref().is_none_or(|(_, b)| c < *b) {
                *best = Some((cur.clone(), c));
            }
            return;
        }
        for col in 0..cost.cols() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                rec(cost, row + 1, used, cur, best);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let mut best = None;
    rec(
        cost,
        0,
        &mut vec![false; cost.cols()],
        &mut Vec::new(),
        &mut best,
    );
    best.expect("n ≤ m admits an assignment")
}

pub struct MatchingReport {
    pub matrices: usize,
    pub mismatches: usize,
}

/// Random `n x m` matrices, `1 ≤ n ≤ 6`, `n ≤ m ≤ 9`. Half use small
/// integer costs so that optimal ties are common.
pub fn matching_oracle(count: usize, seed: u64) -> MatchingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for k in 0..count {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(n..=9);
        let data: Vec<f64> = (0..n * m)
            .map(|_| {
                if k % 2 == 0 {
                    f64::from(rng.random_range(0..4u8))
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let cost = Tensor::matrix(n, m, data);
        let got = hungarian(&cost).expect("valid cost matrix");
        let (want, want_cost) = brute_force_assignment(&cost);
        if got != want || assignment_cost(&cost, &got) != want_cost {
            mismatches += 1;
        }
    }
    MatchingReport {
        matrices: count,
        mismatches,
    }
}

/// Worst deviation over the hand cases: identical boxes (1), two unit
/// squares one unit apart (−1/3), and focal loss at `γ = 0, α = 0.5`
/// against half the binary cross-entropy.
pub fn hand_cases() -> f64 {
    let a = BBox::from_corners(0.1, 0.2, 0.4, 0.7);
    let mut worst = (giou(&a, &a) - 1.0).abs();
    let u = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
    let v = BBox::from_corners(2.0, 0.0, 3.0, 1.0);
    worst = worst.max((giou(&u, &v) + 1.0 / 3.0).abs());
    let fp = FocalParams {
        alpha: 0.5,
        gamma: 0.0,
    };
    for x in [-8.0, -2.5, -0.3, 0.0, 0.7, 3.0, 9.0] {
        for t in [0.0, 1.0] {
            let p: f64 = 1.0 / (1.0 + (-x as f64).exp());
            let bce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            worst = worst.max((focal_bce(x, t, fp) - 0.5 * bce).abs());
        }
    }
    worst
}

fn corners_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Reference AP of one category: stable score sort, greedy matching to the
/// unmatched ground truth of highest IoU, then for each of the 101 recall
/// levels the best precision among operating points at or above it.
pub fn brute_force_ap(dets: &[(usize, [f64; 4], f64)], gts: &[(usize, [f64; 4])], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.partial_cmp(&dets[a].2).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (rank, &d) in order.iter().enumerate() {
        let (img, b, _) = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (j, &(gi, gb)) in gts.iter().enumerate() {
            if gi != img || used[j] {
                continue;
            }
            let v = corners_iou(b, gb);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1.0;
        }
        points.push((tp / gts.len() as f64, tp / (rank + 1) as f64));
    }
    (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

pub struct ApReport {
    pub scenes: usize,
    pub max_abs_err: f64,
    pub monotone: bool,
}

fn rand_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
    [
        x,
        y,
        x + rng.random_range(0.05..0.3),
        y + rng.random_range(0.05..0.3),
    ]
}

/// Random scenes of 10 ground-truth boxes and 15 detections over 3 images
/// and 2 categories. Detections are jittered copies of ground truth or
/// free boxes; scores are coarse so ties occur.
pub fn ap_oracle(scenes: usize, seed: u64) -> ApReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = ["a", "b"];
    let mut max_abs_err: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..scenes {
        let gts: Vec<(usize, usize, [f64; 4])> = (0..10)
            .map(|_| {
                (
                    rng.random_range(0..3),
                    rng.random_range(0..2),
                    rand_box(&mut rng),
                )
            })
            .collect();
        let dets: Vec<(usize, usize, [f64; 4], f64)> = (0..15)
            .map(|_| {
                let score = (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0;
                if rng.random_bool(0.6) {
                    let (i, c, b) = gts[rng.random_range(0..gts.len())];
                    let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-0.04..0.04);
                    let mut nb = [
                        j(b[0], &mut rng),
                        j(b[1], &mut rng),
                        j(b[2], &mut rng),
                        j(b[3], &mut rng),
                    ];
                    if nb[2] <= nb[0] + 0.01 {
                        nb[2] = nb[0] + 0.02;
                    }
                    if nb[3] <= nb[1] + 0.01 {
                        nb[3] = nb[1] + 0.02;
                    }
                    (i, c, nb, score)
                } else {
                    (
                        rng.random_range(0..3),
                        rng.random_range(0..2),
                        rand_box(&mut rng),
                        score,
                    )
                }
            })
            .collect();
        let sb: Vec<ScoredBox> = dets
            .iter()
            .map(|&(i, c, b, s)| ScoredBox {
                image: i,
                category: cats[c].to_string(),
                bbox: BBox::from_corners(b[0], b[1], b[2], b[3]),
                score: s,
            })
            .collect();
        let gb: Vec<GtBox> = gts
            .iter()
            .map(|&(i, c, b)| GtBox {
                image: i,
                category: cats[c].to_string(),
                bbox: BBox::from_corners(b[0], b[1], b[2], b[3]),
            })
            .collect();
        let mut prev: Option<BTreeMap<String, f64>> = None;
        for thr in [0.3, 0.5, 0.75, 0.9] {
            let got = average_precision(&sb, &gb, thr);
            for (ci, c) in cats.iter().enumerate() {
                let g: Vec<(usize, [f64; 4])> = gts
                    .iter()
                    .filter(|t| t.1 == ci)
                    .map(|t| (t.0, t.2))
                    .collect();
                if g.is_empty() {
                    continue;
                }
                let d: Vec<(usize, [f64; 4], f64)> = dets
                    .iter()
                    .filter(|t| t.1 == ci)
                    .map(|t| (t.0, t.2, t.3))
                    .collect();
                let want = brute_force_ap(&d, &g, thr);
                max_abs_err =
                    max_abs_err.max(got.get(*c).map_or(f64::INFINITY, |v| (v - want).abs()));
            }
            if let Some(p) = &prev {
                monotone &= got.iter().all(|(c, v)| *v <= p[c] + 1e-12);
            }
            prev = Some(got);
        }
    }
    ApReport {
        scenes,
        max_abs_err,
        monotone,
    }
}
