//! Dual-encoder model in its pre-training or detection configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::encoders::{
    self, encode_images, encode_texts, final_norm, init_image_encoder, init_map_pool,
    init_text_encoder, interpolate_pos_embed, EncoderConfig, Mode, Temperature, Vocabulary,
    POS_EMBED,
};
use crate::error::{Error, Result};
use crate::head::{
    init_head, predict_boxes, project_class_embeddings, rank_detections, ClassHeads, Detection,
    DetectionOutput, HeadConfig,
};
use crate::imaging::Image;
use crate::nn::{Graph, ParamStore, Var};
use crate::query::QuerySet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Encoders plus attention pooling and temperature.
    Pretrain,
    /// Encoders plus detection heads.
    Detection,
}

/// Graph nodes of a detection forward pass over a batch of images.
#[derive(Clone, Copy, Debug)]
pub struct DetectionVars {
    pub heads: ClassHeads,
    /// `[B·T x 4]` cxcywh.
    pub boxes: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stage: Stage,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

/// Parameters that exist only in the pre-training stage.
pub fn is_pretrain_only(name: &str) -> bool {
    name.starts_with("pool.") || name.starts_with("contrastive.")
}

/// Text-encoder parameters (trained at the reduced text learning rate).
pub fn is_text_param(name: &str) -> bool {
    name.starts_with("text.")
}

impl Model {
    /// Freshly initialized model; the vocabulary size overrides `text_vocab`.
    pub fn init(
        mut config: ModelConfig,
        vocab: Vocabulary,
        stage: Stage,
        seed: u64,
    ) -> Result<Self> {
        config.encoder.text_vocab = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_image_encoder(&mut params, &mut rng, &config.encoder)?;
        init_text_encoder(&mut params, &mut rng, &config.encoder)?;
        match stage {
            Stage::Pretrain => {
                init_map_pool(&mut params, &mut rng, &config.encoder)?;
                Temperature::default().insert_into(&mut params)?;
            }
            Stage::Detection => init_head(&mut params, &mut rng, &config.encoder, &config.head)?,
        }
        Ok(Self {
            config,
            stage,
            vocab,
            params,
        })
    }

    /// Drops pooling and temperature, and adds freshly initialized detection heads.
    pub fn into_detector(mut self, head: HeadConfig, seed: u64) -> Result<Self> {
        head.validate()?;
        self.params
            .retain(|n| !is_pretrain_only(n) && !n.starts_with("head."));
        self.config.head = head;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_head(
            &mut self.params,
            &mut rng,
            &self.config.encoder,
            &self.config.head,
        )?;
        self.stage = Stage::Detection;
        Ok(self)
    }

    /// Changes the input resolution, interpolating the position embeddings.
    pub fn resize_input(&mut self, image_size: usize) -> Result<()> {
        let old = self.config.encoder.grid();
        let mut enc = self.config.encoder.clone();
        enc.image_size = image_size;
        enc.validate()?;
        let pos = self.params.require(POS_EMBED)?;
        let resized = interpolate_pos_embed(pos, old, enc.grid())?;
        self.params.put(POS_EMBED, resized);
        self.config.encoder = enc;
        Ok(())
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(text, self.config.encoder.text_max_len)
    }

    /// Eval-mode text embeddings `[N x D_shared]`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<crate::nn::Tensor> {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t)).collect();
        let mut g = Graph::new();
        let out = encode_texts(&mut g, &self.params, &self.config.encoder, &seqs)?;
        Ok(g.value(out).clone())
    }

    /// Text embeddings as graph nodes, for training.
    pub fn text_vars(&self, g: &mut Graph, params: &ParamStore, texts: &[String]) -> Result<Var> {
        let seqs: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t)).collect();
        encode_texts(g, params, &self.config.encoder, &seqs)
    }

    /// Pooled image embeddings `[B x D_shared]` (pre-training stage).
    pub fn pooled_image_vars(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        images: &[&Image],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let tokens = encode_images(g, params, &self.config.encoder, images, mode, rng)?;
        encoders::map_pool(g, params, &self.config.encoder, tokens, images.len())
    }

    /// Detection heads over a batch of model-sized images.
    pub fn detection_vars(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        images: &[&Image],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<DetectionVars> {
        if self.stage != Stage::Detection {
            return Err(Error::config("model has no detection heads"));
        }
        let enc = &self.config.encoder;
        let tokens = encode_images(g, params, enc, images, mode, rng)?;
        let x = final_norm(g, params, tokens)?;
        let heads = project_class_embeddings(g, params, x)?;
        let boxes = predict_boxes(g, params, x, enc.grid(), self.config.head.location_bias)?;
        Ok(DetectionVars { heads, boxes })
    }

    /// Eval-mode head outputs for one image of any size. Non-square inputs
    /// are padded on the bottom/right; boxes are relative to the padded square.
    pub fn analyze(&self, image: &Image) -> Result<DetectionOutput> {
        let input = image.to_model_input(self.config.encoder.image_size);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.detection_vars(&mut g, &self.params, &[&input], Mode::Eval, &mut rng)?;
        let bv = g.value(v.boxes);
        let boxes = (0..bv.rows())
            .map(|k| BBox::from_slice(bv.row(k)))
            .collect();
        Ok(DetectionOutput {
            grid: self.config.encoder.grid(),
            boxes,
            class_embeddings: g.value(v.heads.emb).clone(),
            logit_scale: g.value(v.heads.scale).data().to_vec(),
            logit_shift: g.value(v.heads.shift).data().to_vec(),
        })
    }

    /// Ranked detections for `queries`, boxes in the original image frame.
    pub fn detect(
        &self,
        image: &Image,
        queries: &QuerySet,
        top_k: usize,
        threshold: f64,
    ) -> Result<Vec<Detection>> {
        if queries.dim() != self.config.encoder.shared_dim() {
            return Err(Error::config(format!(
                "query width {} differs from the model's {}",
                queries.dim(),
                self.config.encoder.shared_dim()
            )));
        }
        let out = self.analyze(image)?;
        rank_in_image_frame(&out, image.height, image.width, queries, top_k, threshold)
    }
}

/// Ranked detections from precomputed head outputs of an `height x width`
/// image, boxes mapped back into the image frame.
pub fn rank_in_image_frame(
    out: &DetectionOutput,
    height: usize,
    width: usize,
    queries: &QuerySet,
    top_k: usize,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let probs = out.probabilities(queries)?;
    let mut dets = rank_detections(&out.boxes, &probs, top_k, threshold);
    for d in &mut dets {
        d.bbox = from_padded_frame(d.bbox, height, width);
    }
    Ok(dets)
}

/// Maps a box from the padded square frame back into the image frame, clipped to it.
pub fn from_padded_frame(b: BBox, height: usize, width: usize) -> BBox {
    let side = height.max(width) as f64;
    let (sx, sy) = (side / width as f64, side / height as f64);
    let c = b.corners();
    BBox::from_corners(
        (c[0] * sx).clamp(0.0, 1.0),
        (c[1] * sy).clamp(0.0, 1.0),
        (c[2] * sx).clamp(0.0, 1.0),
        (c[3] * sy).clamp(0.0, 1.0),
    )
}

/// Maps a box in the image frame into the padded square frame.
pub fn to_padded_frame(b: BBox, height: usize, width: usize) -> BBox {
    let side = height.max(width) as f64;
    let (sx, sy) = (width as f64 / side, height as f64 / side);
    BBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{QueryEntry, QueryOrigin};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                depth: 1,
                width: 16,
                n_heads: 2,
                mlp_dim: 32,
                text_depth: 1,
                text_width: 16,
                text_heads: 2,
                text_mlp_dim: 32,
                ..EncoderConfig::default()
            },
            head: HeadConfig::default(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["red blue circle square"])
    }

    #[test]
    fn detector_drops_pretrain_params() {
        let m = Model::init(tiny_config(), vocab(), Stage::Pretrain, 0).unwrap();
        assert!(m.params.names().any(is_pretrain_only));
        let d = m.into_detector(HeadConfig::default(), 1).unwrap();
        assert!(!d.params.names().any(is_pretrain_only));
        assert!(d.params.contains("head.class.w"));
        assert_eq!(d.stage, Stage::Detection);
    }

    #[test]
    fn detect_is_pure_and_ranked() {
        let m = Model::init(tiny_config(), vocab(), Stage::Detection, 0).unwrap();
        let img = Image::filled(16, 16, 3, 0.3);
        let emb = m.embed_texts(&["red circle", "blue square"]).unwrap();
        let qs = QuerySet::from_rows(&["red circle".into(), "blue square".into()], &emb).unwrap();
        let a = m.detect(&img, &qs, 20, 0.0).unwrap();
        let b = m.detect(&img, &qs, 20, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        let top = m.detect(&img, &qs, 1, 0.0).unwrap();
        assert_eq!(top[0], a[0]);
    }

    #[test]
    fn image_and_text_queries_share_scoring() {
        let m = Model::init(tiny_config(), vocab(), Stage::Detection, 0).unwrap();
        let img = Image::filled(16, 16, 3, 0.6);
        let emb = m.embed_texts(&["red circle"]).unwrap();
        let text = QuerySet::new(vec![QueryEntry::single(
            "q",
            QueryOrigin::Text,
            emb.row(0).to_vec(),
        )])
        .unwrap();
        let image = QuerySet::new(vec![QueryEntry::single(
            "q",
            QueryOrigin::Image,
            emb.row(0).to_vec(),
        )])
        .unwrap();
        assert_eq!(
            m.detect(&img, &text, 5, 0.0).unwrap(),
            m.detect(&img, &image, 5, 0.0).unwrap()
        );
    }

    #[test]
    fn padded_frame_round_trip() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.4);
        let back = from_padded_frame(to_padded_frame(b, 20, 40), 20, 40);
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_input_keeps_corner_embeddings() {
        let mut m = Model::init(tiny_config(), vocab(), Stage::Detection, 0).unwrap();
        let before = m.params.get(POS_EMBED).unwrap().clone();
        m.resize_input(24).unwrap();
        let after = m.params.get(POS_EMBED).unwrap();
        assert_eq!(after.rows(), 36);
        assert_eq!(after.row(0), before.row(0));
        assert_eq!(after.row(35), before.row(15));
        let img = Image::filled(24, 24, 3, 0.5);
        assert_eq!(m.analyze(&img).unwrap().boxes.len(), 36);
    }
}
