//! Building query sets from category names and from example image patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{QueryEntry, QueryOrigin, QuerySet};
use crate::boxes::{iou, BBox};
use crate::datapipe::{PromptMode, PromptTemplates};
use crate::error::{Error, Result};
use crate::head::DetectionOutput;
use crate::imaging::Image;
use crate::model::{to_padded_frame, Model};
use crate::nn::Tensor;

pub const QUERY_IOU: f64 = 0.65;
pub const FALLBACK_QUERY: &str = "an image of an object";

/// One entry per category. Train mode draws a single prompt, eval mode
/// keeps one embedding per evaluation template, `None` embeds the bare name.
pub fn embed_text_queries(
    model: &Model,
    categories: &[String],
    mode: PromptMode,
    templates: &PromptTemplates,
    rng: &mut impl Rng,
) -> Result<QuerySet> {
    if categories.is_empty() {
        return Err(Error::Empty("categories"));
    }
    let mut texts = Vec::new();
    let mut spans = Vec::with_capacity(categories.len());
    for c in categories {
        let prompts = templates.apply(c, mode, rng)?;
        spans.push((texts.len(), prompts.len()));
        texts.extend(prompts);
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let emb = model.embed_texts(&refs)?;
    let entries = categories
        .iter()
        .zip(spans)
        .map(|(c, (start, n))| QueryEntry {
            name: c.clone(),
            origin: QueryOrigin::Text,
            embeddings: (start..start + n).map(|r| emb.row(r).to_vec()).collect(),
        })
        .collect();
    QuerySet::new(entries)
}

/// `f(z_i) = Σ_j z_i · z_j`, self term included.
pub fn dissimilarity_scores(embeddings: &Tensor) -> Vec<f64> {
    let n = embeddings.rows();
    (0..n)
        .map(|i| {
            let zi = embeddings.row(i);
            (0..n)
                .map(|j| {
                    zi.iter()
                        .zip(embeddings.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Index of the smallest score, lowest index on ties.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuery {
    pub embedding: Vec<f64>,
    /// Set when no prediction overlapped the query box and the generic
    /// text query was used instead.
    pub fallback: bool,
    /// Token whose class embedding was chosen.
    pub token: Option<usize>,
}

/// Class embedding of the most dissimilar prediction among those with
/// IoU above `iou_min` against `query_box` (given in the image frame).
pub fn extract_image_query(
    model: &Model,
    image: &Image,
    query_box: BBox,
    iou_min: f64,
) -> Result<ImageQuery> {
    check_query_box(query_box)?;
    let out = model.analyze(image)?;
    match select_query_token(&out, image.height, image.width, query_box, iou_min) {
        Some((token, embedding)) => Ok(ImageQuery {
            embedding,
            fallback: false,
            token: Some(token),
        }),
        None => Ok(ImageQuery {
            embedding: model.embed_texts(&[FALLBACK_QUERY])?.row(0).to_vec(),
            fallback: true,
            token: None,
        }),
    }
}

pub fn check_query_box(query_box: BBox) -> Result<()> {
    if !query_box.is_finite()
        || query_box.w <= 0.0
        || query_box.h <= 0.0
        || !query_box.within_unit(1e-9)
    {
        return Err(Error::InvalidData(format!(
            "query box {query_box:?} is not inside the image"
        )));
    }
    Ok(())
}

/// Candidate selection on precomputed head outputs: `(token, embedding)`,
/// or `None` when no prediction overlaps the query box enough.
pub fn select_query_token(
    out: &DetectionOutput,
    height: usize,
    width: usize,
    query_box: BBox,
    iou_min: f64,
) -> Option<(usize, Vec<f64>)> {
    let target = to_padded_frame(query_box, height, width);
    let candidates: Vec<usize> = (0..out.boxes.len())
        .filter(|&k| iou(&out.boxes[k], &target) > iou_min)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let rows: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&k| out.class_embeddings.row(k).to_vec())
        .collect();
    let pick = argmin(&dissimilarity_scores(&Tensor::from_rows(&rows)))?;
    Some((candidates[pick], rows[pick].clone()))
}

/// Mean of `k ≥ 1` embeddings, L2-normalized.
pub fn fewshot_average(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or(Error::Empty("few-shot embeddings"))?;
    let d = first.len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::config("few-shot embeddings differ in width"));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let k = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(Error::Numerical("few-shot mean has zero norm".into()));
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// Few-shot query from extracted patches. Fallback embeddings are used
/// only when no patch found a matching prediction.
pub fn fewshot_from_patches(patches: &[ImageQuery]) -> Result<Vec<f64>> {
    let found: Vec<Vec<f64>> = patches
        .iter()
        .filter(|p| !p.fallback)
        .map(|p| p.embedding.clone())
        .collect();
    if found.is_empty() {
        fewshot_average(
            &patches
                .iter()
                .map(|p| p.embedding.clone())
                .collect::<Vec<_>>(),
        )
    } else {
        fewshot_average(&found)
    }
}
