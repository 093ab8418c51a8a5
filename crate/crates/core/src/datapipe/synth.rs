//! Procedural dataset of colored shapes on a noisy background.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::example_rng;
use super::{FederatedExample, Instance};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.12, 0.12]),
    ("green", [0.12, 0.78, 0.2]),
    ("blue", [0.18, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.12]),
    ("magenta", [0.9, 0.2, 0.85]),
    ("cyan", [0.15, 0.9, 0.9]),
    ("orange", [0.98, 0.55, 0.1]),
    ("white", [0.97, 0.97, 0.97]),
];

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Categories whose boxes are removed from the training split.
    pub held_out: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side bounds as fractions of the image side.
    pub min_size: f64,
    pub max_size: f64,
    pub crowd_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let colors: Vec<String> = ["red", "green", "blue", "yellow"]
            .map(String::from)
            .to_vec();
        let shapes: Vec<String> = SHAPES.map(String::from).to_vec();
        let held_out = colors
            .iter()
            .zip(&shapes)
            .map(|(c, s)| format!("{c} {s}"))
            .collect();
        Self {
            colors,
            shapes,
            image_size: 32,
            n_train: 512,
            n_eval: 128,
            held_out,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.3,
            max_size: 0.5,
            crowd_probability: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// `"{color} {shape}"`, colors outermost.
    pub fn categories(&self) -> Vec<String> {
        self.colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| format!("{c} {s}")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.colors.iter().find(|c| color_rgb(c).is_none()) {
            return Err(Error::config(format!("unknown color {c:?}")));
        }
        if let Some(s) = self.shapes.iter().find(|s| !SHAPES.contains(&s.as_str())) {
            return Err(Error::config(format!("unknown shape {s:?}")));
        }
        let cats = self.categories();
        if let Some(h) = self.held_out.iter().find(|h| !cats.contains(h)) {
            return Err(Error::config(format!(
                "held-out label {h:?} is not a category"
            )));
        }
        let distinct: BTreeSet<&String> = cats.iter().collect();
        let held: BTreeSet<&String> = self.held_out.iter().collect();
        if distinct.len() != cats.len() || distinct.len() < held.len() + 4 {
            return Err(Error::config(
                "need at least four more categories than held-out labels",
            ));
        }
        let min_px = (self.min_size * self.image_size as f64).round() as usize;
        if self.image_size < 8
            || min_px < 3
            || !(self.min_size <= self.max_size && self.max_size <= 1.0)
        {
            return Err(Error::config("object size range does not fit the image"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range is empty"));
        }
        if !(0.0..=1.0).contains(&self.crowd_probability) {
            return Err(Error::config("crowd probability outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub categories: Vec<String>,
    pub held_out: BTreeSet<String>,
    /// Held-out boxes removed; held-out labels are neither positive nor negative.
    pub train: Vec<FederatedExample>,
    /// Exhaustively annotated.
    pub eval: Vec<FederatedExample>,
    /// Caption of `train[i]`, naming every object including held-out ones.
    pub train_captions: Vec<String>,
    pub eval_captions: Vec<String>,
}

/// Pixel mask of `shape` inside a `w x h` box.
pub fn shape_mask(shape: &str, w: usize, h: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(w * h);
    let (wf, hf) = (w as f64, h as f64);
    for j in 0..h {
        for i in 0..w {
            let u = (i as f64 + 0.5) / wf;
            let v = (j as f64 + 0.5) / hf;
            let inside = match shape {
                "circle" => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                "square" => true,
                "triangle" => (u - 0.5).abs() <= 0.5 * (j + 1) as f64 / hf + 0.5 / wf,
                "cross" => {
                    (u - 0.5).abs() <= 1.0 / 6.0 + 0.5 / wf
                        || (v - 0.5).abs() <= 1.0 / 6.0 + 0.5 / hf
                }
                _ => false,
            };
            m.push(inside);
        }
    }
    m
}

/// Pixel rectangle `(x0, y0, w, h)`.
type Rect = (usize, usize, usize, usize);

fn overlaps(a: Rect, b: Rect) -> bool {
    // One pixel of margin keeps shapes from touching.
    a.0 < b.0 + b.2 + 1 && b.0 < a.0 + a.2 + 1 && a.1 < b.1 + b.3 + 1 && b.1 < a.1 + a.3 + 1
}

fn render(spec: &SynthSpec, rng: &mut impl Rng) -> (Image, Vec<Instance>) {
    let s = spec.image_size;
    let mut img = Image::filled(s, s, 3, 0.0);
    for v in img.data.iter_mut() {
        *v = 0.3 + rng.random_range(-0.08..0.08);
    }
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let lo = ((spec.min_size * s as f64).round() as usize).max(3);
    let hi = ((spec.max_size * s as f64).round() as usize).clamp(lo, s);
    let mut placed: Vec<Rect> = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..n {
        for _attempt in 0..100 {
            let h = rng.random_range(lo..=hi);
            let w = rng.random_range(lo..=hi);
            let rect = (
                rng.random_range(0..=s - w),
                rng.random_range(0..=s - h),
                w,
                h,
            );
            if placed.iter().any(|&p| overlaps(p, rect)) {
                continue;
            }
            let color = &spec.colors[rng.random_range(0..spec.colors.len())];
            let shape = &spec.shapes[rng.random_range(0..spec.shapes.len())];
            let rgb = color_rgb(color).expect("validated color");
            let mask = shape_mask(shape, w, h);
            for j in 0..h {
                for i in 0..w {
                    if mask[j * w + i] {
                        for (c, &v) in rgb.iter().enumerate() {
                            img.set(rect.1 + j, rect.0 + i, c, v);
                        }
                    }
                }
            }
            let sf = s as f64;
            let bbox = BBox::from_corners(
                rect.0 as f64 / sf,
                rect.1 as f64 / sf,
                (rect.0 + w) as f64 / sf,
                (rect.1 + h) as f64 / sf,
            );
            let mut inst = Instance::new(bbox, [format!("{color} {shape}")]);
            inst.crowd = rng.random_bool(spec.crowd_probability);
            instances.push(inst);
            placed.push(rect);
            break;
        }
    }
    (img, instances)
}

/// Sorted object labels joined with " and ".
pub fn caption(instances: &[Instance]) -> String {
    let mut labels: Vec<&str> = instances
        .iter()
        .flat_map(|i| i.labels.iter().map(String::as_str))
        .collect();
    labels.sort_unstable();
    labels.join(" and ")
}

fn annotate(
    image: Image,
    instances: Vec<Instance>,
    categories: &[String],
    hide: &BTreeSet<String>,
) -> FederatedExample {
    let instances: Vec<Instance> = instances
        .into_iter()
        .filter(|i| i.labels.iter().all(|l| !hide.contains(l)))
        .collect();
    let positive: BTreeSet<String> = instances
        .iter()
        .flat_map(|i| i.labels.iter().cloned())
        .collect();
    let negative = categories
        .iter()
        .filter(|c| !positive.contains(*c) && !hide.contains(*c))
        .cloned()
        .collect();
    FederatedExample {
        image,
        instances,
        positive,
        negative,
    }
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let categories = spec.categories();
    let held_out: BTreeSet<String> = spec.held_out.iter().cloned().collect();
    let none = BTreeSet::new();
    let mut out = SynthDataset {
        categories: categories.clone(),
        held_out: held_out.clone(),
        train: Vec::with_capacity(spec.n_train),
        eval: Vec::with_capacity(spec.n_eval),
        train_captions: Vec::with_capacity(spec.n_train),
        eval_captions: Vec::with_capacity(spec.n_eval),
    };
    for idx in 0..spec.n_train + spec.n_eval {
        let mut rng = example_rng(spec.seed, idx as u64);
        let (image, instances) = render(spec, &mut rng);
        let cap = caption(&instances);
        if idx < spec.n_train {
            out.train
                .push(annotate(image, instances, &categories, &held_out));
            out.train_captions.push(cap);
        } else {
            out.eval
                .push(annotate(image, instances, &categories, &none));
            out.eval_captions.push(cap);
        }
    }
    Ok(out)
}
