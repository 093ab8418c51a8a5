//! Desk-scale training experiments on the synthetic color × shape world.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovd_core::boxes::{iou, BBox};
use ovd_core::datapipe::{
    synth_dataset, MosaicConfig, PromptMode, PromptTemplates, SynthDataset, SynthSpec,
};
use ovd_core::encoders::{EncoderConfig, Vocabulary};
use ovd_core::eval::{evaluate, one_shot_protocol, EvalConfig, OneShotConfig, SplitSpec};
use ovd_core::head::HeadConfig;
use ovd_core::model::{Model, ModelConfig, Stage};
use ovd_core::nn::Tensor;
use ovd_core::query::{argmin, dissimilarity_scores, select_query_token, QUERY_IOU};
use ovd_core::train::{
    prepare_detector, prepare_sources, pretrain, retrieval_accuracy, Finetuner, TrainConfig,
    TrainStage,
};
use ovd_core::Result;

pub fn model_config(patch_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size,
            depth: 2,
            text_depth: 2,
            width: 64,
            ..EncoderConfig::default()
        },
        head: HeadConfig::default(),
    }
}

fn vocabulary(d: &SynthDataset, t: &PromptTemplates) -> Vocabulary {
    Vocabulary::build(
        t.all()
            .chain(d.categories.iter().map(String::as_str))
            .chain(d.train_captions.iter().map(String::as_str)),
    )
}

fn no_prompt_eval() -> EvalConfig {
    EvalConfig {
        prompt_mode: PromptMode::None,
        iou_thresholds: vec![0.5],
        ..EvalConfig::default()
    }
}

pub struct PretrainRun {
    pub model: Model,
    pub retrieval: f64,
    pub pairs: usize,
    pub elapsed: Duration,
}

/// Contrastive pre-training on single-object captioned images; retrieval is
/// measured on pairs never seen in training.
pub fn pretrain_encoders(seed: u64, vocab: &Vocabulary) -> Result<PretrainRun> {
    let start = Instant::now();
    let data = synth_dataset(&SynthSpec {
        n_train: 8192,
        n_eval: 128,
        max_objects: 1,
        held_out: Vec::new(),
        seed: 1000 + seed,
        ..SynthSpec::default()
    })?;
    let mut cfg = TrainConfig {
        stage: TrainStage::Pretrain,
        steps: 3000,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    cfg.optimizer.base_lr = 2e-3;
    cfg.optimizer.warmup_steps = 300;
    let images: Vec<_> = data.train.iter().map(|e| e.image.clone()).collect();
    let init = Model::init(model_config(8), vocab.clone(), Stage::Pretrain, seed)?;
    let (model, _) = pretrain(init, &cfg, &images, &data.train_captions)?;
    let eval_images: Vec<_> = data.eval.iter().map(|e| e.image.clone()).collect();
    let retrieval = retrieval_accuracy(&model, &eval_images, &data.eval_captions)?;
    Ok(PretrainRun {
        model,
        retrieval,
        pairs: images.len(),
        elapsed: start.elapsed(),
    })
}

/// Detection data and vocabulary shared by the zero-shot and one-shot runs.
pub fn detection_world(seed: u64) -> Result<(SynthDataset, Vocabulary, PromptTemplates)> {
    let det = synth_dataset(&SynthSpec {
        n_train: 1024,
        seed,
        ..SynthSpec::default()
    })?;
    let t = PromptTemplates::default();
    let vocab = vocabulary(&det, &t);
    Ok((det, vocab, t))
}

pub struct OverfitRun {
    /// First evaluated step reaching the target, if any.
    pub reached_at: Option<usize>,
    pub best: f64,
    pub elapsed: Duration,
}

/// Fine-tunes from scratch on 8 images and reports when train AP50 first
/// reaches `target`, evaluating every `every` steps.
pub fn overfit(
    seed: u64,
    location_bias: bool,
    max_steps: usize,
    every: usize,
    target: f64,
) -> Result<OverfitRun> {
    let start = Instant::now();
    let d = synth_dataset(&SynthSpec {
        n_train: 8,
        n_eval: 0,
        held_out: Vec::new(),
        seed,
        ..SynthSpec::default()
    })?;
    let t = PromptTemplates::default();
    let vocab = vocabulary(&d, &t);
    let mut cfg = TrainConfig {
        steps: max_steps,
        batch_size: 8,
        seed,
        require_pretrained: false,
        location_bias,
        text_lr_ratio: 1.0,
        ..TrainConfig::default()
    };
    cfg.optimizer.base_lr = 1e-3;
    cfg.optimizer.warmup_steps = 20;
    cfg.augment.mosaic = MosaicConfig::disabled();
    cfg.augment.random_crop = false;
    cfg.augment.train_prompts = PromptMode::None;
    let model = prepare_detector(None, &model_config(4), &vocab, &cfg)?;
    let ecfg = no_prompt_eval();
    let none = BTreeSet::new();
    let mut tr = Finetuner::new(model, cfg, vec![d.train.clone()], t.clone())?;
    let (mut reached_at, mut best) = (None, 0.0f64);
    while tr.step_count() < max_steps && reached_at.is_none() {
        tr.step()?;
        if tr.step_count() % every == 0 {
            let ap50 = evaluate(tr.model(), &d.train, &d.categories, &none, &t, &ecfg)?.ap50;
            best = best.max(ap50);
            if ap50 >= target {
                reached_at = Some(tr.step_count());
            }
        }
    }
    Ok(OverfitRun {
        reached_at,
        best,
        elapsed: start.elapsed(),
    })
}

pub struct ZeroShotRun {
    pub heldout_ap50: f64,
    pub control_heldout_ap50: f64,
    pub ap50: f64,
    pub retrieval: f64,
    pub elapsed: Duration,
    pub model: Model,
    pub data: SynthDataset,
}

fn finetune_detector(
    start: Option<Model>,
    det: &SynthDataset,
    vocab: &Vocabulary,
    t: &PromptTemplates,
    seed: u64,
) -> Result<Model> {
    let mut cfg = TrainConfig {
        steps: 1500,
        batch_size: 8,
        seed,
        require_pretrained: start.is_some(),
        ..TrainConfig::default()
    };
    cfg.optimizer.base_lr = 1e-3;
    cfg.optimizer.warmup_steps = 150;
    cfg.augment.train_prompts = PromptMode::None;
    cfg.augment.mosaic = MosaicConfig::disabled();
    cfg.augment.random_crop = false;
    let sources = prepare_sources(std::slice::from_ref(&det.train), &det.held_out, &cfg);
    let model = prepare_detector(start, &model_config(8), vocab, &cfg)?;
    let mut tr = Finetuner::new(model, cfg, sources, t.clone())?;
    tr.run(|_, _| Ok(()))?;
    Ok(tr.into_model())
}

/// Pre-training plus fine-tuning with the held-out combinations removed,
/// against the same fine-tuning from random encoders.
pub fn zero_shot(seed: u64) -> Result<ZeroShotRun> {
    let start = Instant::now();
    let (det, vocab, t) = detection_world(seed)?;
    let pre = pretrain_encoders(seed, &vocab)?;
    let ecfg = no_prompt_eval();
    let model = finetune_detector(Some(pre.model), &det, &vocab, &t, seed)?;
    let ours = evaluate(&model, &det.eval, &det.categories, &det.held_out, &t, &ecfg)?;
    let control = finetune_detector(None, &det, &vocab, &t, seed)?;
    let theirs = evaluate(
        &control,
        &det.eval,
        &det.categories,
        &det.held_out,
        &t,
        &ecfg,
    )?;
    Ok(ZeroShotRun {
        heldout_ap50: ours.ap50_heldout.unwrap_or(0.0),
        control_heldout_ap50: theirs.ap50_heldout.unwrap_or(0.0),
        ap50: ours.ap50,
        retrieval: pre.retrieval,
        elapsed: start.elapsed(),
        model,
        data: det,
    })
}

pub struct OneShotRun {
    pub k1: f64,
    pub k10: f64,
    pub fallback_rate: f64,
}

/// Image-conditioned AP50 on the held-out combinations with 1 and 10 shots.
pub fn one_shot(model: &Model, det: &SynthDataset) -> Result<OneShotRun> {
    let ss = SplitSpec::new(det.held_out.iter().cloned());
    let run = |shots| {
        one_shot_protocol(
            model,
            &det.eval,
            &ss,
            &OneShotConfig {
                shots,
                ..OneShotConfig::default()
            },
        )
    };
    let k1 = run(1)?;
    let k10 = run(10)?;
    Ok(OneShotRun {
        k1: k1.ap50,
        k10: k10.ap50,
        fallback_rate: k1.fallback_rate,
    })
}

fn brute_force_argmin(rows: &[Vec<i64>]) -> usize {
    let f = |i: usize| -> i128 {
        rows.iter()
            .map(|zj| {
                rows[i]
                    .iter()
                    .zip(zj)
                    .map(|(&a, &b)| i128::from(a) * i128::from(b))
                    .sum::<i128>()
            })
            .sum()
    };
    let mut best = 0;
    for i in 1..rows.len() {
        if f(i) < f(best) {
            best = i;
        }
    }
    best
}

/// Integer embeddings make every score exact, ties included. Returns the
/// number of disagreements.
pub fn argmin_oracle(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..=6);
        let rows: Vec<Vec<i64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3..=3)).collect())
            .collect();
        let t = Tensor::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect::<Vec<_>>(),
        );
        if argmin(&dissimilarity_scores(&t)) != Some(brute_force_argmin(&rows)) {
            wrong += 1;
        }
    }
    wrong
}

/// Token selection on real head outputs against a direct recomputation of
/// the candidate set and the score minimizer. Returns (queries, mismatches).
pub fn selection_oracle(
    model: &Model,
    det: &SynthDataset,
    images: usize,
) -> Result<(usize, usize)> {
    let (mut queries, mut wrong) = (0, 0);
    for ex in det.eval.iter().take(images) {
        let out = model.analyze(&ex.image)?;
        for inst in &ex.instances {
            queries += 1;
            let q: BBox = inst.bbox;
            let cands: Vec<usize> = (0..out.boxes.len())
                .filter(|&k| iou(&out.boxes[k], &q) > QUERY_IOU)
                .collect();
            let expected = if cands.is_empty() {
                None
            } else {
                let score = |k: usize| -> f64 {
                    let zk = out.class_embeddings.row(k);
                    cands
                        .iter()
                        .map(|&j| {
                            zk.iter()
                                .zip(out.class_embeddings.row(j))
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                        })
                        .sum()
                };
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if score(k) < score(best) {
                        best = k;
                    }
                }
                Some(best)
            };
            let got = select_query_token(&out, ex.image.height, ex.image.width, q, QUERY_IOU)
                .map(|s| s.0);
            if got != expected {
                wrong += 1;
            }
        }
    }
    Ok((queries, wrong))
}
