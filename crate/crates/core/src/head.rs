//! Per-token class embeddings, location-biased boxes and query scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{self, init_linear};
use crate::nn::{init, sigmoid, Graph, ParamStore, Tensor, Var};
use crate::query::QuerySet;

const PRIOR_CLAMP: f64 = 1e-4;
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Center each token's default box on its patch.
    pub location_bias: bool,
    /// Initial logit scale (before per-token variation).
    pub init_logit_scale: f64,
    /// Initial logit shift.
    pub init_logit_shift: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            location_bias: true,
            init_logit_scale: 10.0,
            init_logit_shift: -4.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_logit_scale > SCALE_FLOOR) || !self.init_logit_shift.is_finite() {
            return Err(Error::config(
                "initial logit scale must be positive and shift finite",
            ));
        }
        Ok(())
    }
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn init_head(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    enc: &EncoderConfig,
    cfg: &HeadConfig,
) -> Result<()> {
    let d = enc.width;
    init_linear(store, rng, "head.class", d, enc.shared_dim())?;
    store.insert("head.scale.w", init::normal(rng, &[d, 1], 0.01))?;
    store.insert(
        "head.scale.b",
        Tensor::scalar(softplus_inverse(cfg.init_logit_scale - SCALE_FLOOR)),
    )?;
    store.insert("head.shift.w", init::normal(rng, &[d, 1], 0.01))?;
    store.insert("head.shift.b", Tensor::scalar(cfg.init_logit_shift))?;
    init_linear(store, rng, "head.box.fc1", d, d)?;
    init_linear(store, rng, "head.box.fc2", d, d)?;
    store.insert("head.box.fc3.w", Tensor::zeros(&[d, 4]))?;
    store.insert("head.box.fc3.b", Tensor::zeros(&[1, 4]))
}

/// Class embeddings with per-token logit scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct ClassHeads {
    /// `[T x D_shared]`.
    pub emb: Var,
    /// `[T x 1]`, positive.
    pub scale: Var,
    /// `[T x 1]`.
    pub shift: Var,
}

/// Linear class projection plus the scale (`softplus + 1e-6`) and shift heads.
pub fn project_class_embeddings(g: &mut Graph, p: &ParamStore, tokens: Var) -> Result<ClassHeads> {
    let emb = layers::linear(g, p, "head.class", tokens)?;
    let s = layers::linear(g, p, "head.scale", tokens)?;
    let s = g.softplus(s);
    let floor = g.constant(Tensor::scalar(SCALE_FLOOR));
    let scale = g.add(s, floor);
    let shift = layers::linear(g, p, "head.shift", tokens)?;
    Ok(ClassHeads { emb, scale, shift })
}

impl ClassHeads {
    /// Rows `[start, start + len)` of every head (one image of a batch).
    pub fn rows(&self, g: &mut Graph, start: usize, len: usize) -> ClassHeads {
        let idx: Vec<usize> = (start..start + len).collect();
        ClassHeads {
            emb: g.gather_rows(self.emb, &idx),
            scale: g.gather_rows(self.scale, &idx),
            shift: g.gather_rows(self.shift, &idx),
        }
    }
}

/// Pre-sigmoid default boxes `[G² x 4]`: patch centers and one-patch sizes,
/// or the image center at half size when `location_bias` is off.
pub fn box_prior(grid: usize, location_bias: bool) -> Tensor {
    let t = grid * grid;
    let mut out = Tensor::zeros(&[t, 4]);
    if !location_bias {
        return out;
    }
    let size = logit(1.0 / grid as f64);
    for r in 0..grid {
        for c in 0..grid {
            let row = out.row_mut(r * grid + c);
            row[0] = logit((c as f64 + 0.5) / grid as f64);
            row[1] = logit((r as f64 + 0.5) / grid as f64);
            row[2] = size;
            row[3] = size;
        }
    }
    out
}

/// Three-layer box MLP decoded as `σ(raw + prior)` into cxcywh. `tokens`
/// may stack several images of `G²` rows each.
pub fn predict_boxes(
    g: &mut Graph,
    p: &ParamStore,
    tokens: Var,
    grid: usize,
    location_bias: bool,
) -> Result<Var> {
    let t = grid * grid;
    let rows = g.shape(tokens).0;
    if t == 0 || rows % t != 0 {
        return Err(Error::config(format!(
            "{rows} tokens do not tile a {grid}x{grid} grid"
        )));
    }
    let h = layers::linear(g, p, "head.box.fc1", tokens)?;
    let h = g.gelu(h);
    let h = layers::linear(g, p, "head.box.fc2", h)?;
    let h = g.gelu(h);
    let raw = layers::linear(g, p, "head.box.fc3", h)?;
    let prior = box_prior(grid, location_bias);
    let prior = if rows == t {
        prior
    } else {
        let reps: Vec<Vec<f64>> = (0..rows).map(|r| prior.row(r % t).to_vec()).collect();
        Tensor::from_rows(&reps)
    };
    let prior = g.constant(prior);
    let z = g.add(raw, prior);
    Ok(g.sigmoid(z))
}

/// `[T x Q]` logits `cos(z_t, q) · scale_t + shift_t` with both sides unit-normalized.
pub fn query_logits(g: &mut Graph, heads: &ClassHeads, queries: Var) -> Result<Var> {
    if g.shape(queries).0 == 0 {
        return Err(Error::Empty("queries"));
    }
    if g.shape(queries).1 != g.shape(heads.emb).1 {
        return Err(Error::config(
            "query width differs from class embedding width",
        ));
    }
    let ze = g.normalize_rows(heads.emb)?;
    let zq = g.normalize_rows(queries)?;
    let cos = g.matmul_nt(ze, zq);
    let scaled = g.mul(cos, heads.scale);
    Ok(g.add(scaled, heads.shift))
}

/// Detached per-token head outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub grid: usize,
    pub boxes: Vec<BBox>,
    /// `[T x D_shared]`, unnormalized.
    pub class_embeddings: Tensor,
    pub logit_scale: Vec<f64>,
    pub logit_shift: Vec<f64>,
}

impl DetectionOutput {
    /// Raw `[T x M]` logits against query rows, through [`query_logits`].
    pub fn logits(&self, queries: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.boxes.len();
        let heads = ClassHeads {
            emb: g.constant(self.class_embeddings.clone()),
            scale: g.constant(Tensor::matrix(t, 1, self.logit_scale.clone())),
            shift: g.constant(Tensor::matrix(t, 1, self.logit_shift.clone())),
        };
        let q = g.constant(queries.clone());
        let l = query_logits(&mut g, &heads, q)?;
        Ok(g.value(l).clone())
    }

    /// `[T x Q]` probabilities, averaging the sigmoid over each entry's embeddings.
    pub fn probabilities(&self, queries: &QuerySet) -> Result<Tensor> {
        let (flat, group) = queries.flatten();
        let logits = self.logits(&flat)?;
        let t = self.boxes.len();
        let q = queries.len();
        let mut sums = Tensor::zeros(&[t, q]);
        let mut counts = vec![0usize; q];
        for &gi in &group {
            counts[gi] += 1;
        }
        for k in 0..t {
            let lr = logits.row(k);
            let sr = sums.row_mut(k);
            for (m, &gi) in group.iter().enumerate() {
                sr[gi] += sigmoid(lr[m]);
            }
            for (s, &c) in sr.iter_mut().zip(&counts) {
                *s /= c as f64;
            }
        }
        Ok(sums)
    }
}

/// One scored box for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub query_index: usize,
    pub token: usize,
}

/// Every `(token, query)` pair with probability `≥ threshold`, best first,
/// truncated to `top_k`. Equal scores keep token-major order.
pub fn rank_detections(
    boxes: &[BBox],
    probs: &Tensor,
    top_k: usize,
    threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        for (q, &s) in probs.row(k).iter().enumerate() {
            if s >= threshold {
                out.push(Detection {
                    bbox: *b,
                    score: s,
                    query_index: q,
                    token: k,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.token.cmp(&b.token))
            .then(a.query_index.cmp(&b.query_index))
    });
    out.truncate(top_k);
    out
}
