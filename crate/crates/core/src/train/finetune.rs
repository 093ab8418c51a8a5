//! Detection fine-tuning on mixed federated sources.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{StepMetrics, TrainConfig, TrainStage, Updater};
use crate::checkpoint::save_checkpoint;
use crate::datapipe::{
    build_mosaic, example_rng, merge_instances, random_crop, sample_mosaic_grid,
    sample_pseudo_negatives, CategoryFrequencyTable, DatasetMixer, FederatedExample,
    PromptTemplates,
};
use crate::encoders::{Mode, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::remove_labels;
use crate::head::{query_logits, HeadConfig};
use crate::model::{Model, ModelConfig, Stage};
use crate::nn::optim::{cosine_lr, per_example_clip};
use crate::nn::{Graph, ParamStore};
use crate::setloss::{detection_loss, QuerySpace};

/// Detection model for fine-tuning: the pre-trained encoders with fresh
/// heads, or a fresh model when `cfg.require_pretrained` is off.
pub fn prepare_detector(
    pretrained: Option<Model>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Model> {
    let head = HeadConfig {
        location_bias: cfg.location_bias,
        ..config.head.clone()
    };
    match pretrained {
        Some(m) if m.stage == Stage::Pretrain => m.into_detector(head, cfg.seed),
        Some(_) => Err(Error::config("expected pre-trained encoders, found a detection model")),
        None if cfg.require_pretrained => Err(Error::config(
            "fine-tuning requires pre-trained parameters (set require_pretrained = false to start from scratch)",
        )),
        None => {
            let config = ModelConfig {
                head,
                ..config.clone()
            };
            Model::init(config, vocab.clone(), Stage::Detection, cfg.seed)
        }
    }
}

/// Removes crowd instances. Labels left without any instance leave the positives.
fn drop_crowd(ex: &FederatedExample) -> FederatedExample {
    if !ex.instances.iter().any(|i| i.crowd) {
        return ex.clone();
    }
    let kept: Vec<_> = ex.instances.iter().filter(|i| !i.crowd).cloned().collect();
    let mut out = FederatedExample {
        instances: kept,
        ..ex.clone()
    };
    drop_orphan_labels(&mut out, ex);
    out
}

/// Drops positives that had instances in `before` and have none in `ex`.
fn drop_orphan_labels(ex: &mut FederatedExample, before: &FederatedExample) {
    let had: BTreeSet<&String> = before.instances.iter().flat_map(|i| &i.labels).collect();
    let has: BTreeSet<String> = ex
        .instances
        .iter()
        .flat_map(|i| i.labels.iter().cloned())
        .collect();
    ex.positive.retain(|c| !had.contains(c) || has.contains(c));
}

/// Static per-source cleanup: crowd removal and held-out label removal.
pub fn prepare_sources(
    sources: &[Vec<FederatedExample>],
    held_out: &BTreeSet<String>,
    cfg: &TrainConfig,
) -> Vec<Vec<FederatedExample>> {
    sources
        .iter()
        .map(|src| {
            src.iter()
                .map(|ex| {
                    let ex = if cfg.augment.drop_crowd {
                        drop_crowd(ex)
                    } else {
                        ex.clone()
                    };
                    if cfg.augment.keep_held_out || held_out.is_empty() {
                        ex
                    } else {
                        remove_labels(&ex, held_out)
                    }
                })
                .collect()
        })
        .collect()
}

/// Keeps the `capacity` largest instances.
fn fit_capacity(ex: &mut FederatedExample, capacity: usize) {
    if ex.instances.len() <= capacity {
        return;
    }
    let before = ex.clone();
    let mut order: Vec<usize> = (0..ex.instances.len()).collect();
    order.sort_by(|&a, &b| {
        before.instances[b]
            .bbox
            .area()
            .total_cmp(&before.instances[a].bbox.area())
            .then(a.cmp(&b))
    });
    order.truncate(capacity);
    order.sort_unstable();
    ex.instances = order.iter().map(|&i| before.instances[i].clone()).collect();
    drop_orphan_labels(ex, &before);
}

/// Step-wise fine-tuner. Every example gets its own graph and its gradient
/// is clipped before averaging.
pub struct Finetuner {
    model: Model,
    cfg: TrainConfig,
    sources: Vec<Vec<FederatedExample>>,
    freq: CategoryFrequencyTable,
    templates: PromptTemplates,
    mixer: DatasetMixer,
    updater: Updater,
    step: usize,
}

impl Finetuner {
    /// `sources` should already have been through [`prepare_sources`].
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        sources: Vec<Vec<FederatedExample>>,
        templates: PromptTemplates,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != TrainStage::Finetune || model.stage != Stage::Detection {
            return Err(Error::config(
                "fine-tuning needs a fine-tuning config and a detection model",
            ));
        }
        let ratios = if sources.len() == cfg.augment.dataset_ratios.len() {
            cfg.augment.dataset_ratios.clone()
        } else if sources.len() == 1 {
            vec![1.0]
        } else {
            return Err(Error::config(format!(
                "{} sources but {} dataset ratios",
                sources.len(),
                cfg.augment.dataset_ratios.len()
            )));
        };
        let sizes: Vec<usize> = sources.iter().map(Vec::len).collect();
        let mixer = DatasetMixer::new(&sizes, &ratios, cfg.seed)?;
        let freq = CategoryFrequencyTable::from_examples(sources.iter().flatten());
        Ok(Self {
            updater: Updater::new(&model.params),
            model,
            cfg,
            sources,
            freq,
            templates,
            mixer,
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

    /// Next augmented training example: a mosaic of cropped, merged source
    /// images at model resolution.
    pub fn sample_example(&mut self, rng: &mut impl Rng) -> Result<FederatedExample> {
        let aug = &self.cfg.augment;
        let k = sample_mosaic_grid(&aug.mosaic, rng)?;
        let mut tiles = Vec::with_capacity(k * k);
        for _ in 0..k * k {
            let (s, i) = self.mixer.next_index();
            let mut ex = self.sources[s][i].clone();
            if aug.merge_instances {
                ex.instances = merge_instances(ex.instances, aug.merge_iou, rng);
            }
            if aug.random_crop {
                ex = random_crop(&ex, &aug.crop, rng);
            }
            tiles.push(ex);
        }
        let mut ex = build_mosaic(&tiles, k, self.model.encoder().image_size)?;
        fit_capacity(&mut ex, self.model.encoder().n_tokens());
        Ok(ex)
    }

    /// Query space for `ex`: positives, annotated negatives, then pseudo-negatives.
    pub fn query_space(&self, ex: &FederatedExample, rng: &mut impl Rng) -> QuerySpace {
        let extra = if self.cfg.augment.pseudo_negatives {
            sample_pseudo_negatives(ex, &self.freq, self.cfg.augment.min_negatives, rng)
        } else {
            Vec::new()
        };
        QuerySpace::new(&ex.positive, ex.negative.iter().chain(&extra))
    }

    /// Loss components and parameter gradients of one example, or `None`
    /// when the example has no queries at all.
    fn example_grads(
        &self,
        ex: &FederatedExample,
        rng: &mut impl Rng,
    ) -> Result<Option<(ParamStore, [f64; 4])>> {
        let qs = self.query_space(ex, rng);
        if qs.is_empty() {
            return Ok(None);
        }
        let mut texts = Vec::with_capacity(qs.len());
        for c in qs.categories() {
            let mut prompts = self
                .templates
                .apply(c, self.cfg.augment.train_prompts, rng)?;
            let pick = if prompts.len() > 1 {
                rng.random_range(0..prompts.len())
            } else {
                0
            };
            texts.push(prompts.swap_remove(pick));
        }
        let params = &self.model.params;
        let mut g = Graph::new();
        let dv = self
            .model
            .detection_vars(&mut g, params, &[&ex.image], Mode::Train, rng)?;
        let q = self.model.text_vars(&mut g, params, &texts)?;
        let logits = query_logits(&mut g, &dv.heads, q)?;
        let dl = detection_loss(&mut g, logits, dv.boxes, &ex.instances, &qs, self.cfg.focal)?;
        let total = g.value(dl.total).item();
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {total} at step {}",
                self.step
            )));
        }
        let grads = g.backward(dl.total);
        Ok(Some((
            g.param_grads(&grads, params),
            [total, dl.cls, dl.l1, dl.giou],
        )))
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let b = self.cfg.batch_size;
        let mut per_example = Vec::with_capacity(b);
        let mut sums = [0.0; 4];
        let mut n_queries = 0usize;
        for j in 0..b {
            let mut rng = example_rng(self.cfg.seed, (self.step * b + j) as u64);
            let ex = self.sample_example(&mut rng)?;
            n_queries += ex.positive.len() + ex.negative.len();
            match self.example_grads(&ex, &mut rng)? {
                Some((g, parts)) => {
                    per_example.push(g);
                    for (s, p) in sums.iter_mut().zip(parts) {
                        *s += p;
                    }
                }
                None => per_example.push(self.model.params.zeros_like()),
            }
        }
        let grads = per_example_clip(&per_example, self.cfg.optimizer.max_per_example_grad_norm)?;
        drop(per_example);
        let o = &self.cfg.optimizer;
        let lr = cosine_lr(self.step, self.cfg.steps, o.base_lr, o.warmup_steps)?;
        self.updater
            .apply(&mut self.model.params, &grads, &self.cfg, lr)?;
        let inv = 1.0 / b as f64;
        let metrics = StepMetrics {
            step: self.step,
            loss: sums[0] * inv,
            components: BTreeMap::from([
                ("cls".to_string(), sums[1] * inv),
                ("l1".to_string(), sums[2] * inv),
                ("giou".to_string(), sums[3] * inv),
                ("annotated_queries".to_string(), n_queries as f64 * inv),
            ]),
            lr,
        };
        self.step += 1;
        if let Some(path) = &self.cfg.checkpoint_path {
            let every = self.cfg.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == self.cfg.steps {
                save_checkpoint(&self.model, self.step as u64, path)?;
            }
        }
        Ok(metrics)
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

/// Fine-tunes `model` for `cfg.steps` steps and returns it with the metrics log.
pub fn finetune(
    model: Model,
    cfg: &TrainConfig,
    sources: Vec<Vec<FederatedExample>>,
    templates: PromptTemplates,
) -> Result<(Model, Vec<StepMetrics>)> {
    let mut t = Finetuner::new(model, cfg.clone(), sources, templates)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::datapipe::{synth_dataset, Instance, MosaicConfig, SynthSpec};
    use crate::encoders::EncoderConfig;
    use crate::imaging::Image;
    use crate::model::is_pretrain_only;

    fn model_config() -> ModelConfig {
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

    fn data() -> (Vec<FederatedExample>, Vocabulary) {
        let spec = SynthSpec {
            image_size: 16,
            n_train: 8,
            n_eval: 2,
            max_objects: 2,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        let t = PromptTemplates::default();
        let vocab = Vocabulary::build(t.all().chain(d.categories.iter().map(String::as_str)));
        (d.train, vocab)
    }

    fn cfg(steps: usize) -> TrainConfig {
        let mut c = TrainConfig {
            steps,
            batch_size: 2,
            require_pretrained: false,
            ..TrainConfig::default()
        };
        c.optimizer.warmup_steps = 0;
        c.optimizer.base_lr = 1e-3;
        c
    }

    #[test]
    fn missing_pretrained_params_are_an_error() {
        let (_, vocab) = data();
        let strict = TrainConfig::default();
        assert!(prepare_detector(None, &model_config(), &vocab, &strict).is_err());
        let m = prepare_detector(None, &model_config(), &vocab, &cfg(1)).unwrap();
        assert_eq!(m.stage, Stage::Detection);
    }

    #[test]
    fn detector_from_pretraining_has_no_pooling() {
        let (_, vocab) = data();
        let pre = Model::init(model_config(), vocab.clone(), Stage::Pretrain, 0).unwrap();
        let mut c = TrainConfig::default();
        c.location_bias = false;
        let d = prepare_detector(Some(pre.clone()), &model_config(), &vocab, &c).unwrap();
        assert!(!d.params.names().any(is_pretrain_only));
        assert!(!d.config.head.location_bias);
        assert_eq!(d.params.get("text.proj.w"), pre.params.get("text.proj.w"));
    }

    #[test]
    fn traces_repeat_and_pooling_stays_absent() {
        let (train, vocab) = data();
        let c = cfg(3);
        let m = prepare_detector(None, &model_config(), &vocab, &c).unwrap();
        let run = || {
            finetune(
                m.clone(),
                &c,
                vec![train.clone()],
                PromptTemplates::default(),
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
        assert!(la.iter().all(|s| s.loss.is_finite() && s.loss > 0.0));
        assert!(!a.params.names().any(is_pretrain_only));
    }

    #[test]
    fn frozen_text_encoder_stays_fixed() {
        let (train, vocab) = data();
        let mut c = cfg(2);
        c.text_lr_ratio = 0.0;
        let m = prepare_detector(None, &model_config(), &vocab, &c).unwrap();
        let (after, _) = finetune(m.clone(), &c, vec![train], PromptTemplates::default()).unwrap();
        for (name, t) in after.params.iter() {
            let before = m.params.get(name).unwrap();
            if name.starts_with("text.") {
                assert_eq!(t, before, "{name}");
            }
        }
        assert_ne!(
            after.params.get("head.class.w"),
            m.params.get("head.class.w")
        );
    }

    #[test]
    fn source_ratios_must_match() {
        let (train, vocab) = data();
        let c = cfg(1);
        let m = prepare_detector(None, &model_config(), &vocab, &c).unwrap();
        let three = vec![train.clone(), train.clone(), train];
        assert!(Finetuner::new(m, c, three, PromptTemplates::default()).is_err());
    }

    fn ex_with(instances: Vec<Instance>) -> FederatedExample {
        FederatedExample {
            image: Image::filled(16, 16, 3, 0.5),
            positive: instances
                .iter()
                .flat_map(|i| i.labels.iter().cloned())
                .collect(),
            negative: BTreeSet::new(),
            instances,
        }
    }

    #[test]
    fn crowd_removal_and_capacity_drop_orphans() {
        let mut crowd = Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["a"]);
        crowd.crowd = true;
        let ex = ex_with(vec![
            crowd,
            Instance::new(BBox::new(0.2, 0.2, 0.1, 0.1), ["b"]),
        ]);
        let d = drop_crowd(&ex);
        assert_eq!(d.instances.len(), 1);
        assert!(!d.positive.contains("a") && d.positive.contains("b"));

        let mut big = ex_with(vec![
            Instance::new(BBox::new(0.2, 0.2, 0.1, 0.1), ["small"]),
            Instance::new(BBox::new(0.6, 0.6, 0.5, 0.5), ["big"]),
        ]);
        fit_capacity(&mut big, 1);
        assert_eq!(big.instances.len(), 1);
        assert!(big.positive.contains("big") && !big.positive.contains("small"));
    }

    #[test]
    fn held_out_labels_are_removed_unless_kept() {
        let ex = ex_with(vec![
            Instance::new(BBox::new(0.5, 0.5, 0.2, 0.2), ["rare"]),
            Instance::new(BBox::new(0.2, 0.2, 0.1, 0.1), ["common"]),
        ]);
        let held: BTreeSet<String> = ["rare".to_string()].into();
        let out = prepare_sources(&[vec![ex.clone()]], &held, &TrainConfig::default());
        assert_eq!(out[0][0].instances.len(), 1);
        assert!(!out[0][0].positive.contains("rare"));
        let mut keep = TrainConfig::default();
        keep.augment.keep_held_out = true;
        assert_eq!(prepare_sources(&[vec![ex.clone()]], &held, &keep)[0][0], ex);
    }

    #[test]
    fn examples_fit_the_model() {
        let (train, vocab) = data();
        let mut c = cfg(1);
        c.augment.mosaic = MosaicConfig::new(vec![0.0, 0.0, 1.0]).unwrap();
        let m = prepare_detector(None, &model_config(), &vocab, &c).unwrap();
        let mut t = Finetuner::new(m, c, vec![train], PromptTemplates::default()).unwrap();
        let mut rng = example_rng(0, 0);
        for _ in 0..5 {
            let ex = t.sample_example(&mut rng).unwrap();
            assert_eq!((ex.image.height, ex.image.width), (16, 16));
            assert!(ex.instances.len() <= 16);
            ex.validate().unwrap();
            let qs = t.query_space(&ex, &mut rng);
            assert!(ex.positive.iter().all(|p| qs.index_of(p).is_some()));
        }
    }
}
