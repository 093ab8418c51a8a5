//! Contrastive image-caption pre-training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{StepMetrics, TrainConfig, TrainStage, Updater};
use crate::checkpoint::save_checkpoint;
use crate::encoders::{clamp_log_tau, contrastive_loss, Mode, LOG_TAU};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::{Model, Stage};
use crate::nn::optim::{clip_global, cosine_lr};
use crate::nn::{Graph, Tensor};

/// Step-wise contrastive trainer over a fixed set of (image, caption) pairs.
pub struct Pretrainer {
    model: Model,
    cfg: TrainConfig,
    images: Vec<Image>,
    captions: Vec<String>,
    updater: Updater,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    step: usize,
}

impl Pretrainer {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        images: &[Image],
        captions: &[String],
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != TrainStage::Pretrain || model.stage != Stage::Pretrain {
            return Err(Error::config(
                "pre-training needs a pre-training config and model",
            ));
        }
        if images.len() != captions.len() {
            return Err(Error::config("one caption per image is required"));
        }
        if images.len() < 2 {
            return Err(Error::Empty("image-caption pairs"));
        }
        let size = model.encoder().image_size;
        let images = images.iter().map(|im| im.to_model_input(size)).collect();
        let updater = Updater::new(&model.params);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..captions.len()).collect(),
            cursor: usize::MAX,
            captions: captions.to_vec(),
            images,
            updater,
            model,
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cfg.batch_size.min(self.order.len());
        if self.cursor == usize::MAX || self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    /// Contrastive loss of one batch at the current parameters, in train mode.
    pub fn batch_loss(&mut self, batch: &[usize]) -> Result<(Graph, crate::nn::Var)> {
        let mut g = Graph::new();
        let imgs: Vec<&Image> = batch.iter().map(|&i| &self.images[i]).collect();
        let texts: Vec<String> = batch.iter().map(|&i| self.captions[i].clone()).collect();
        let params = &self.model.params;
        let zi = self
            .model
            .pooled_image_vars(&mut g, params, &imgs, Mode::Train, &mut self.rng)?;
        let zt = self.model.text_vars(&mut g, params, &texts)?;
        let lt = g.param(params, LOG_TAU)?;
        let loss = contrastive_loss(&mut g, zi, zt, lt)?;
        Ok((g, loss))
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch();
        let (g, loss) = self.batch_loss(&batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {value} at step {}",
                self.step
            )));
        }
        let grads = g.backward(loss);
        let mut pg = g.param_grads(&grads, &self.model.params);
        let grad_norm = pg.global_norm();
        clip_global(&mut pg, self.cfg.optimizer.max_per_example_grad_norm);
        let o = &self.cfg.optimizer;
        let lr = cosine_lr(self.step, self.cfg.steps, o.base_lr, o.warmup_steps)?;
        self.updater
            .apply(&mut self.model.params, &pg, &self.cfg, lr)?;
        clamp_log_tau(&mut self.model.params);
        let tau = self.model.params.require(LOG_TAU)?.item().exp();
        let metrics = StepMetrics {
            step: self.step,
            loss: value,
            components: BTreeMap::from([
                ("contrastive".to_string(), value),
                ("grad_norm".to_string(), grad_norm),
                ("tau".to_string(), tau),
            ]),
            lr,
        };
        self.step += 1;
        self.maybe_checkpoint()?;
        Ok(metrics)
    }

    fn maybe_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            let every = self.cfg.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == self.cfg.steps {
                save_checkpoint(&self.model, self.step as u64, path)?;
            }
        }
        Ok(())
    }

    /// Runs the remaining steps, reporting each one to `on_step`.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepMetrics, &Model) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let m = self.step()?;
            on_step(&m, &self.model)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains `model` for `cfg.steps` steps and returns it with the metrics log.
pub fn pretrain(
    model: Model,
    cfg: &TrainConfig,
    images: &[Image],
    captions: &[String],
) -> Result<(Model, Vec<StepMetrics>)> {
    let mut t = Pretrainer::new(model, cfg.clone(), images, captions)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.into_model(), log))
}

/// Eval-mode pooled embeddings, unit-normalized, `[N x D_shared]`.
pub fn image_embeddings(model: &Model, images: &[Image]) -> Result<Tensor> {
    let size = model.encoder().image_size;
    let mut rows = Vec::with_capacity(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(32) {
        let inputs: Vec<Image> = chunk.iter().map(|im| im.to_model_input(size)).collect();
        let refs: Vec<&Image> = inputs.iter().collect();
        let mut g = Graph::new();
        let z = model.pooled_image_vars(&mut g, &model.params, &refs, Mode::Eval, &mut rng)?;
        let z = g.normalize_rows(z)?;
        let v = g.value(z);
        rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Top-1 caption of each image among the distinct `candidates`, by cosine
/// similarity (lowest candidate index on ties).
pub fn retrieve_captions(
    model: &Model,
    images: &[Image],
    candidates: &[&str],
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("caption candidates"));
    }
    let zi = image_embeddings(model, images)?;
    let zt = model.embed_texts(candidates)?;
    let norms: Vec<f64> = (0..zt.rows())
        .map(|c| zt.row(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok((0..zi.rows())
        .map(|r| {
            let zr = zi.row(r);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (c, norm) in norms.iter().enumerate() {
                let s = zr.iter().zip(zt.row(c)).map(|(a, b)| a * b).sum::<f64>() / norm;
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1
        })
        .collect())
}

/// Image→text top-1 accuracy: each image ranks the distinct captions of the
/// set and counts as correct when its own caption wins.
pub fn retrieval_accuracy(model: &Model, images: &[Image], captions: &[String]) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(Error::config("one caption per image is required"));
    }
    if images.is_empty() {
        return Err(Error::Empty("retrieval set"));
    }
    let mut distinct: Vec<&str> = captions.iter().map(String::as_str).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let picks = retrieve_captions(model, images, &distinct)?;
    let correct = picks
        .iter()
        .zip(captions)
        .filter(|(&p, c)| distinct[p] == c.as_str())
        .count();
    Ok(correct as f64 / captions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_dataset, SynthSpec};
    use crate::encoders::{EncoderConfig, Vocabulary};
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Vec<Image>, Vec<String>) {
        let spec = SynthSpec {
            image_size: 16,
            n_train: 24,
            n_eval: 4,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        let cfg = ModelConfig {
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
        };
        let vocab = Vocabulary::build(d.train_captions.iter().map(String::as_str));
        let m = Model::init(cfg, vocab, Stage::Pretrain, 0).unwrap();
        let images = d.train.iter().map(|e| e.image.clone()).collect();
        (m, images, d.train_captions)
    }

    fn cfg(steps: usize, lr: f64) -> TrainConfig {
        let mut c = TrainConfig {
            stage: TrainStage::Pretrain,
            steps,
            batch_size: 8,
            ..TrainConfig::default()
        };
        c.optimizer.base_lr = lr;
        c.optimizer.warmup_steps = 0;
        c
    }

    #[test]
    fn zero_rate_leaves_params_unchanged() {
        let (m, im, cap) = setup();
        let (after, log) = pretrain(m.clone(), &cfg(1, 0.0), &im, &cap).unwrap();
        assert_eq!(after.params, m.params);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn traces_repeat_exactly() {
        let (m, im, cap) = setup();
        let a = pretrain(m.clone(), &cfg(4, 1e-3), &im, &cap).unwrap();
        let b = pretrain(m, &cfg(4, 1e-3), &im, &cap).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.params, b.0.params);
    }

    #[test]
    fn rejects_detection_models() {
        let (m, im, cap) = setup();
        let det = m.into_detector(HeadConfig::default(), 0).unwrap();
        assert!(Pretrainer::new(det, cfg(1, 0.0), &im, &cap).is_err());
    }

    #[test]
    fn retrieval_is_a_fraction() {
        let (m, im, cap) = setup();
        let acc = retrieval_accuracy(&m, &im, &cap).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(retrieval_accuracy(&m, &im[..2], &cap[..1]).is_err());
    }
}
