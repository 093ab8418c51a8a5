//! Two-stage training: contrastive pre-training, then detection fine-tuning.

mod ablation;
mod finetune;
mod pretrain;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_matrix, AblationRow};
pub use finetune::{finetune, prepare_detector, prepare_sources, Finetuner};
pub use pretrain::{image_embeddings, pretrain, retrieval_accuracy, retrieve_captions, Pretrainer};

use crate::datapipe::{CropConstraints, MosaicConfig, PromptMode, MERGE_IOU, MIN_NEGATIVES};
use crate::error::{Error, Result};
use crate::model::is_text_param;
use crate::nn::optim::{adam_step, sgd_step, AdamState, OptimizerConfig};
use crate::nn::ParamStore;
use crate::setloss::FocalParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Adam,
    /// Plain gradient descent; update sizes are exactly proportional to the rates.
    Sgd,
}

/// Data handling of detection fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub train_prompts: PromptMode,
    pub eval_prompts: PromptMode,
    pub pseudo_negatives: bool,
    pub min_negatives: usize,
    pub mosaic: MosaicConfig,
    pub random_crop: bool,
    pub crop: CropConstraints,
    pub merge_instances: bool,
    pub merge_iou: f64,
    /// Remove crowd-flagged instances before training.
    pub drop_crowd: bool,
    /// Train on annotations of held-out labels too.
    pub keep_held_out: bool,
    /// Sampling probability of each training source.
    pub dataset_ratios: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            train_prompts: PromptMode::Train,
            eval_prompts: PromptMode::Eval,
            pseudo_negatives: true,
            min_negatives: MIN_NEGATIVES,
            mosaic: MosaicConfig::default(),
            random_crop: true,
            crop: CropConstraints::default(),
            merge_instances: true,
            merge_iou: MERGE_IOU,
            drop_crowd: true,
            keep_held_out: false,
            dataset_ratios: vec![0.7, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Text-encoder rate as a fraction of the image-encoder rate during fine-tuning.
    pub text_lr_ratio: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub location_bias: bool,
    pub update_rule: UpdateRule,
    pub focal: FocalParams,
    /// Fine-tuning refuses to start from randomly initialized encoders.
    pub require_pretrained: bool,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: TrainStage::Finetune,
            steps: 1000,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            text_lr_ratio: 0.01,
            seed: 0,
            augment: AugmentConfig::default(),
            location_bias: true,
            update_rule: UpdateRule::Adam,
            focal: FocalParams::default(),
            require_pretrained: true,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.focal.validate()?;
        self.augment.mosaic.validate()?;
        self.augment.crop.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch size must be positive"));
        }
        if !(self.text_lr_ratio >= 0.0 && self.text_lr_ratio.is_finite()) {
            return Err(Error::config("text_lr_ratio must be a non-negative number"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::config("checkpoint_every needs checkpoint_path"));
        }
        Ok(())
    }

    /// Parses JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rate of parameter `name` given the image-encoder rate.
    pub fn lr_for(&self, name: &str, image_lr: f64) -> f64 {
        if self.stage == TrainStage::Finetune && is_text_param(name) {
            image_lr * self.text_lr_ratio
        } else {
            image_lr
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
}

/// Appends metrics as JSON lines.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("<metrics>", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Optimizer state for either update rule.
#[derive(Clone, Debug)]
pub struct Updater {
    state: AdamState,
}

impl Updater {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            state: AdamState::new(params),
        }
    }

    /// Applies `grads` with rate `cfg.lr_for(name, image_lr)` per parameter.
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        cfg: &TrainConfig,
        image_lr: f64,
    ) -> Result<()> {
        let lr = |name: &str| cfg.lr_for(name, image_lr);
        match cfg.update_rule {
            UpdateRule::Adam => adam_step(params, grads, &mut self.state, &cfg.optimizer, lr),
            UpdateRule::Sgd => sgd_step(params, grads, lr),
        }
    }
}
