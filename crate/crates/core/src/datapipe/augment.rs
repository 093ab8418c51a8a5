//! Instance merging, random cropping and mosaics.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FederatedExample, Instance};
use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::imaging::{Image, PAD_GRAY};

pub const MERGE_IOU: f64 = 0.9;

/// Repeatedly merges the most-overlapping pair of instances while its IoU
/// is at least `threshold`. The merged instance carries the union of the
/// labels and one of the two boxes chosen uniformly; it stays in the pool.
pub fn merge_instances(
    mut instances: Vec<Instance>,
    threshold: f64,
    rng: &mut impl Rng,
) -> Vec<Instance> {
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..instances.len() {
            for j in i + 1..instances.len() {
                let v = iou(&instances[i].bbox, &instances[j].bbox);
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, i, j));
                }
            }
        }
        match best {
            Some((v, i, j)) if v >= threshold => {
                let b = instances.remove(j);
                let a = &mut instances[i];
                if rng.random_bool(0.5) {
                    a.bbox = b.bbox;
                }
                a.labels.extend(b.labels);
                a.crowd |= b.crowd;
            }
            _ => return instances,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConstraints {
    /// Width/height ratio bounds of the crop in pixels.
    pub aspect: (f64, f64),
    /// Crop area bounds as a fraction of the image area.
    pub area: (f64, f64),
    /// Minimum fraction of a box's area that must survive the crop.
    pub min_retention: f64,
    pub max_attempts: usize,
}

impl Default for CropConstraints {
    fn default() -> Self {
        Self {
            aspect: (0.75, 1.33),
            area: (0.33, 1.0),
            min_retention: 0.6,
            max_attempts: 100,
        }
    }
}

impl CropConstraints {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.aspect.0
            && self.aspect.0 <= self.aspect.1
            && 0.0 < self.area.0
            && self.area.0 <= self.area.1
            && self.area.1 <= 1.0
            && (0.0..=1.0).contains(&self.min_retention);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid crop constraints {self:?}")))
        }
    }

    /// Samples a pixel rectangle `(y0, x0, h, w)`, or the full image after
    /// `max_attempts` rejections.
    pub fn sample_window(
        &self,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> (usize, usize, usize, usize) {
        let total = (height * width) as f64;
        for _ in 0..self.max_attempts {
            let area = rng.random_range(self.area.0..=self.area.1) * total;
            let aspect = rng
                .random_range(self.aspect.0.ln()..=self.aspect.1.ln())
                .exp();
            let w = (area * aspect).sqrt().round() as usize;
            let h = (area / aspect).sqrt().round() as usize;
            if w == 0 || h == 0 || w > width || h > height {
                continue;
            }
            let (a, r) = ((h * w) as f64 / total, w as f64 / h as f64);
            if a < self.area.0 || a > self.area.1 || r < self.aspect.0 || r > self.aspect.1 {
                continue;
            }
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            return (y0, x0, h, w);
        }
        (0, 0, height, width)
    }
}

/// Crops `ex` to the pixel window `(y0, x0, h, w)`, keeps boxes retaining at
/// least `min_retention` of their area (clipped to the window), and pads the
/// result to a square with gray on the bottom/right edge.
///
/// A category whose instances were all dropped leaves the positive set: it
/// may still be partly visible, so it cannot be declared negative either.
pub fn crop_to_window(
    ex: &FederatedExample,
    (y0, x0, h, w): (usize, usize, usize, usize),
    min_retention: f64,
) -> FederatedExample {
    if (y0, x0, h, w) == (0, 0, ex.image.height, ex.image.width) && ex.image.is_square() {
        return ex.clone();
    }
    let (ih, iw) = (ex.image.height as f64, ex.image.width as f64);
    let window = BBox::from_corners(
        x0 as f64 / iw,
        y0 as f64 / ih,
        (x0 + w) as f64 / iw,
        (y0 + h) as f64 / ih,
    );
    let side = h.max(w) as f64;
    let mut instances = Vec::new();
    for inst in &ex.instances {
        let clipped = inst.bbox.intersect(&window);
        let area = inst.bbox.area();
        if clipped.area() <= 0.0
            || area <= 0.0
            || clipped.area() < min_retention * area * (1.0 - 1e-9)
        {
            continue;
        }
        let c = clipped.corners();
        let map_x = |x: f64| ((x * iw - x0 as f64) / side).clamp(0.0, 1.0);
        let map_y = |y: f64| ((y * ih - y0 as f64) / side).clamp(0.0, 1.0);
        instances.push(Instance {
            bbox: BBox::from_corners(map_x(c[0]), map_y(c[1]), map_x(c[2]), map_y(c[3])),
            labels: inst.labels.clone(),
            crowd: inst.crowd,
        });
    }
    let before: BTreeSet<&String> = ex.instances.iter().flat_map(|i| &i.labels).collect();
    let after: BTreeSet<&String> = instances.iter().flat_map(|i| &i.labels).collect();
    let positive = ex
        .positive
        .iter()
        .filter(|c| !before.contains(c) || after.contains(c))
        .cloned()
        .collect();
    FederatedExample {
        image: ex.image.crop(y0, x0, h, w).pad_to_square(PAD_GRAY),
        instances,
        positive,
        negative: ex.negative.clone(),
    }
}

pub fn random_crop(
    ex: &FederatedExample,
    cc: &CropConstraints,
    rng: &mut impl Rng,
) -> FederatedExample {
    let window = cc.sample_window(ex.image.height, ex.image.width, rng);
    crop_to_window(ex, window, cc.min_retention)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicConfig {
    /// `probabilities[k-1]` is the chance of a `k x k` grid.
    pub probabilities: Vec<f64>,
}

impl MosaicConfig {
    /// `p_k = 2(M−k+1) / (M(M+1))`, favouring small grids.
    pub fn linear(max_grid: usize) -> Result<Self> {
        if max_grid == 0 {
            return Err(Error::config("mosaic grid must be at least 1"));
        }
        let m = max_grid as f64;
        let probabilities = (1..=max_grid)
            .map(|k| 2.0 * (m - k as f64 + 1.0) / (m * (m + 1.0)))
            .collect();
        Ok(Self { probabilities })
    }

    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        let cfg = Self { probabilities };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disabled() -> Self {
        Self {
            probabilities: vec![1.0],
        }
    }

    pub fn max_grid(&self) -> usize {
        self.probabilities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probabilities.iter().sum();
        if self.probabilities.is_empty()
            || self.probabilities.iter().any(|p| !(*p >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "mosaic probabilities {:?} must be non-negative and sum to 1",
                self.probabilities
            )));
        }
        Ok(())
    }
}

impl Default for MosaicConfig {
    fn default() -> Self {
        Self::linear(3).expect("M = 3 is valid")
    }
}

/// Grid side `k ∈ [1, M]`.
pub fn sample_mosaic_grid(mc: &MosaicConfig, rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(&mc.probabilities)
        .map_err(|e| Error::config(format!("mosaic probabilities: {e}")))?;
    Ok(dist.sample(rng) + 1)
}

/// Tiles `k²` examples row-major into a `target x target` image.
///
/// Positives are the union over tiles. A category is negative only if every
/// tile lists it as negative and no tile lists it as positive.
pub fn build_mosaic(
    examples: &[FederatedExample],
    k: usize,
    target: usize,
) -> Result<FederatedExample> {
    if k == 0 || examples.len() != k * k {
        return Err(Error::config(format!(
            "a {k}x{k} mosaic needs {} tiles, got {}",
            k * k,
            examples.len()
        )));
    }
    if target < k {
        return Err(Error::config(format!(
            "mosaic of {target} px cannot hold {k} tiles per side"
        )));
    }
    let channels = examples[0].image.channels;
    if examples.iter().any(|e| e.image.channels != channels) {
        return Err(Error::config("mosaic tiles differ in channel count"));
    }
    let edge = |i: usize| (i * target + k / 2) / k;
    let mut image = Image::filled(target, target, channels, PAD_GRAY);
    let mut instances = Vec::new();
    let mut positive = BTreeSet::new();
    for (idx, ex) in examples.iter().enumerate() {
        let (r, c) = (idx / k, idx % k);
        let (y0, y1, x0, x1) = (edge(r), edge(r + 1), edge(c), edge(c + 1));
        let src = if ex.image.is_square() {
            ex.image.clone()
        } else {
            ex.image.pad_to_square(PAD_GRAY)
        };
        let pad_x = ex.image.width as f64 / src.width as f64;
        let pad_y = ex.image.height as f64 / src.height as f64;
        image.paste(&src.resize(y1 - y0, x1 - x0), y0, x0);
        let (ox, oy) = (x0 as f64 / target as f64, y0 as f64 / target as f64);
        let (sx, sy) = (
            (x1 - x0) as f64 / target as f64,
            (y1 - y0) as f64 / target as f64,
        );
        for inst in &ex.instances {
            let b = inst.bbox;
            instances.push(Instance {
                bbox: BBox::new(
                    ox + b.cx * pad_x * sx,
                    oy + b.cy * pad_y * sy,
                    b.w * pad_x * sx,
                    b.h * pad_y * sy,
                ),
                labels: inst.labels.clone(),
                crowd: inst.crowd,
            });
        }
        positive.extend(ex.positive.iter().cloned());
    }
    let mut negative: BTreeSet<String> = examples[0].negative.clone();
    for ex in &examples[1..] {
        negative.retain(|c| ex.negative.contains(c));
    }
    negative.retain(|c| !positive.contains(c));
    Ok(FederatedExample {
        image,
        instances,
        positive,
        negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn example(instances: Vec<Instance>, negative: &[&str]) -> FederatedExample {
        let positive = instances
            .iter()
            .flat_map(|i| i.labels.iter().cloned())
            .collect();
        FederatedExample {
            image: Image::filled(20, 20, 3, 0.2),
            instances,
            positive,
            negative: set(negative),
        }
    }

    #[test]
    fn merge_high_overlap() {
        let a = BBox::new(0.5, 0.5, 0.4, 0.4);
        let b = BBox::new(0.5, 0.5, 0.4, 0.38);
        assert!(iou(&a, &b) >= 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = merge_instances(
            vec![Instance::new(a, ["A"]), Instance::new(b, ["B"])],
            MERGE_IOU,
            &mut rng,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].labels, set(&["A", "B"]));
        assert!(out[0].bbox == a || out[0].bbox == b);
    }

    #[test]
    fn merge_picks_each_box_sometimes() {
        let a = BBox::new(0.5, 0.5, 0.4, 0.4);
        let b = BBox::new(0.5, 0.5, 0.4, 0.39);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks: Vec<bool> = (0..50)
            .map(|_| {
                let out = merge_instances(
                    vec![Instance::new(a, ["A"]), Instance::new(b, ["B"])],
                    0.9,
                    &mut rng,
                );
                out[0].bbox == a
            })
            .collect();
        assert!(picks.iter().any(|&p| p) && picks.iter().any(|&p| !p));
    }

    #[test]
    fn merge_low_overlap_unchanged() {
        let a = Instance::new(BBox::new(0.4, 0.5, 0.4, 0.4), ["A"]);
        let b = Instance::new(BBox::new(0.6, 0.5, 0.4, 0.4), ["B"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = merge_instances(vec![a.clone(), b.clone()], 0.9, &mut rng);
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn merge_three_identical() {
        let bx = BBox::new(0.3, 0.3, 0.2, 0.2);
        let insts = vec![
            Instance::new(bx, ["A"]),
            Instance::new(bx, ["B"]),
            Instance::new(bx, ["C"]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = merge_instances(insts, 0.9, &mut rng);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].labels, set(&["A", "B", "C"]));
    }

    #[test]
    fn full_window_keeps_instances() {
        let ex = example(
            vec![Instance::new(BBox::new(0.3, 0.4, 0.2, 0.3), ["A"])],
            &["B"],
        );
        let out = crop_to_window(&ex, (0, 0, 20, 20), 0.6);
        assert_eq!(out, ex);
        let cc = CropConstraints {
            area: (1.0, 1.0),
            aspect: (1.0, 1.0),
            ..CropConstraints::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&ex, &cc, &mut rng), ex);
    }

    #[test]
    fn retention_threshold() {
        // Box spans x ∈ [0.2, 0.7] of a 200 px image; windows ending at
        // pixel 101 and 99 retain 61% and 59% of its area.
        let mut ex = example(
            vec![Instance::new(BBox::from_corners(0.2, 0.0, 0.7, 1.0), ["A"])],
            &[],
        );
        ex.image = Image::filled(200, 200, 1, 0.0);
        let kept = crop_to_window(&ex, (0, 0, 200, 101), 0.6);
        assert_eq!(kept.instances.len(), 1);
        let c = kept.instances[0].bbox.corners();
        assert!((c[0] - 0.2).abs() < 1e-12 && (c[2] - 0.505).abs() < 1e-12);
        assert!((c[3] - 1.0).abs() < 1e-12);
        let dropped = crop_to_window(&ex, (0, 0, 200, 99), 0.6);
        assert!(dropped.instances.is_empty());
        assert!(dropped.positive.is_empty());
        dropped.validate().unwrap();
        let all = crop_to_window(&ex, (0, 0, 200, 41), 0.0);
        assert_eq!(all.instances.len(), 1);
    }

    #[test]
    fn crop_pads_bottom_right_with_gray() {
        let ex = example(vec![], &[]);
        let out = crop_to_window(&ex, (2, 3, 10, 6), 0.6);
        assert_eq!((out.image.height, out.image.width), (10, 10));
        assert_eq!(out.image.get(0, 5, 0), 0.2);
        assert_eq!(out.image.get(0, 6, 0), PAD_GRAY);
        assert_eq!(out.image.get(9, 9, 0), PAD_GRAY);
    }

    #[test]
    fn sampled_windows_satisfy_constraints() {
        let cc = CropConstraints::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let (y0, x0, h, w) = cc.sample_window(64, 48, &mut rng);
            assert!(y0 + h <= 64 && x0 + w <= 48);
            if (h, w) != (64, 48) {
                let a = (h * w) as f64 / (64.0 * 48.0);
                let r = w as f64 / h as f64;
                assert!(a >= 0.33 && a <= 1.0 && r >= 0.75 && r <= 1.33);
            }
        }
    }

    #[test]
    fn mosaic_law() {
        let p = MosaicConfig::linear(3).unwrap().probabilities;
        for (a, b) in p.iter().zip([0.5, 1.0 / 3.0, 1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = MosaicConfig::linear(4).unwrap().probabilities;
        for (a, b) in p.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = MosaicConfig::linear(1).unwrap();
        assert!((0..100).all(|_| sample_mosaic_grid(&one, &mut rng).unwrap() == 1));
        assert!(MosaicConfig::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn mosaic_box_transform() {
        let tiles: Vec<FederatedExample> = (0..4)
            .map(|i| {
                if i == 3 {
                    example(
                        vec![Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["A"])],
                        &[],
                    )
                } else {
                    example(vec![], &[])
                }
            })
            .collect();
        let m = build_mosaic(&tiles, 2, 20).unwrap();
        let b = m.instances[0].bbox.to_array();
        for (x, y) in b.iter().zip([0.75, 0.75, 0.1, 0.1]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(build_mosaic(&tiles[..3], 2, 20).is_err());
    }

    #[test]
    fn mosaic_identity_for_one_tile() {
        let ex = example(
            vec![Instance::new(BBox::new(0.3, 0.6, 0.2, 0.4), ["A"])],
            &["B"],
        );
        assert_eq!(build_mosaic(std::slice::from_ref(&ex), 1, 20).unwrap(), ex);
    }

    #[test]
    fn mosaic_negatives_are_sound() {
        let a = example(vec![], &["X", "Y"]);
        let b = example(
            vec![Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["X"])],
            &["Y", "Z"],
        );
        let c = example(vec![], &["X", "Y"]);
        let d = example(vec![], &["X", "Y", "Z"]);
        let m = build_mosaic(&[a, b, c, d], 2, 20).unwrap();
        assert_eq!(m.positive, set(&["X"]));
        assert_eq!(m.negative, set(&["Y"]));
        m.validate().unwrap();
    }
}
