//! Subcommands of the `ovd` binary.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use ovd_core::boxes::BBox;
use ovd_core::checkpoint::{load_checkpoint, save_checkpoint};
use ovd_core::datapipe::{synth_dataset, DatasetFile, PromptMode, PromptTemplates, SynthSpec};
use ovd_core::encoders::{EncoderConfig, Vocabulary};
use ovd_core::eval::{evaluate, EvalConfig};
use ovd_core::head::HeadConfig;
use ovd_core::imaging::Image;
use ovd_core::model::{Model, ModelConfig, Stage};
use ovd_core::query::{embed_text_queries, extract_image_query, QUERY_IOU};
use ovd_core::train::{
    ablation_matrix, prepare_detector, prepare_sources, Finetuner, MetricsWriter, Pretrainer,
    StepMetrics, TrainConfig, TrainStage,
};

use crate::server::{self, DetectResponse, DetectionJson, ServeConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ovd",
    version,
    about = "Open-vocabulary object detection at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Overrides the seed of the loaded configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON or TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic colored-shapes dataset (train, train_full, eval).
    SynthData {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Contrastive pre-training on captioned images.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Model architecture (JSON or TOML `ModelConfig`).
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Detection fine-tuning; one `--data` per source.
    Finetune {
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Pre-trained checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Comma-separated labels removed from training.
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Text-queried AP over a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        /// Also write IoU-0.5 precision/recall curves as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Detect text queries in one PNG image and print JSON.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated queries.
        #[arg(long, value_delimiter = ',', required = true)]
        text: Vec<String>,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long, value_enum, default_value_t = Prompt::Eval)]
        prompts: Prompt,
    },
    /// Embedding of the object inside a box, for image-conditioned detection.
    ExtractQuery {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `xmin,ymin,xmax,ymax`, normalized.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        r#box: Vec<f64>,
    },
    /// Fine-tune and evaluate selected recipe ablations.
    Ablate {
        /// Comma-separated row numbers (1-15); all rows when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        #[arg(long, required_unless_present = "dry_run")]
        data: Vec<PathBuf>,
        #[arg(long, required_unless_present = "dry_run")]
        eval: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        /// Print the selected configurations without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Serve a detection checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simultaneous forward passes (default: logical cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 1024)]
        max_image_side: usize,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Prompt {
    Eval,
    Single,
    None,
}

impl From<Prompt> for PromptMode {
    fn from(p: Prompt) -> Self {
        match p {
            Prompt::Eval => PromptMode::Eval,
            Prompt::Single => PromptMode::Single,
            Prompt::None => PromptMode::None,
        }
    }
}

/// Parses JSON, or TOML when the extension is `.toml`.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn require_out(common: &Common) -> anyhow::Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| anyhow!("--out is required"))
}

fn model_config(path: Option<&Path>) -> anyhow::Result<ModelConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }),
    }
}

fn train_config(common: &Common, stage: TrainStage) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_image(path: &Path) -> anyhow::Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Image::from_png(&bytes)?)
}

fn load_detector(path: &Path) -> anyhow::Result<(Model, u64)> {
    let (model, step) = load_checkpoint(path, None)?;
    if model.stage != Stage::Detection {
        bail!(
            "{} is a pre-training checkpoint; fine-tune it first",
            path.display()
        );
    }
    Ok((model, step))
}

/// Vocabulary covering the given texts and every prompt template.
fn vocabulary<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    templates: &'a PromptTemplates,
) -> Vocabulary {
    Vocabulary::build(templates.all().chain(texts))
}

struct Progress {
    metrics: Option<MetricsWriter<BufWriter<File>>>,
    every: usize,
}

impl Progress {
    fn new(path: Option<&Path>, steps: usize) -> anyhow::Result<Self> {
        let metrics = match path {
            Some(p) => Some(MetricsWriter::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))),
            None => None,
        };
        Ok(Self {
            metrics,
            every: (steps / 20).max(1),
        })
    }

    fn record(&mut self, m: &StepMetrics) -> ovd_core::Result<()> {
        if let Some(w) = &mut self.metrics {
            w.write(m)?;
        }
        if m.step % self.every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", m.step, m.loss, m.lr);
        }
        Ok(())
    }

    fn finish(self) -> anyhow::Result<()> {
        if let Some(w) = self.metrics {
            w.into_inner().flush()?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::SynthData {
            n_train,
            n_eval,
            image_size,
        } => synth_data(common, n_train, n_eval, image_size),
        Command::Pretrain {
            data,
            model_config,
            metrics,
        } => pretrain(common, &data, model_config.as_deref(), metrics.as_deref()),
        Command::Finetune {
            data,
            init,
            model_config,
            held_out,
            metrics,
        } => finetune(
            common,
            &data,
            init.as_deref(),
            model_config.as_deref(),
            &held_out,
            metrics.as_deref(),
        ),
        Command::Evaluate {
            checkpoint,
            data,
            held_out,
            pr_csv,
        } => evaluate_cmd(common, &checkpoint, &data, &held_out, pr_csv.as_deref()),
        Command::Detect {
            checkpoint,
            image,
            text,
            threshold,
            top_k,
            prompts,
        } => detect(
            common,
            &checkpoint,
            &image,
            &text,
            threshold,
            top_k,
            prompts.into(),
        ),
        Command::ExtractQuery {
            checkpoint,
            image,
            r#box,
        } => extract_query(common, &checkpoint, &image, &r#box),
        Command::Ablate {
            rows,
            data,
            eval,
            init,
            model_config,
            held_out,
            dry_run,
        } => ablate(
            common,
            &rows,
            &data,
            eval.as_deref(),
            init.as_deref(),
            model_config.as_deref(),
            &held_out,
            dry_run,
        ),
        Command::Serve {
            checkpoint,
            host,
            port,
            workers,
            max_image_side,
        } => {
            let (model, step) = load_detector(&checkpoint)?;
            let mut cfg = ServeConfig {
                max_image_side,
                ..ServeConfig::default()
            };
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let addr = format!("{host}:{port}")
                .parse()
                .context("invalid --host/--port")?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(model, step, cfg, addr))
        }
    }
}

fn synth_data(
    common: &Common,
    n_train: Option<usize>,
    n_eval: Option<usize>,
    image_size: Option<usize>,
) -> anyhow::Result<()> {
    let out = require_out(common)?;
    let mut spec: SynthSpec = match &common.config {
        Some(p) => load_config(p)?,
        None => SynthSpec::default(),
    };
    spec.n_train = n_train.unwrap_or(spec.n_train);
    spec.n_eval = n_eval.unwrap_or(spec.n_eval);
    spec.image_size = image_size.unwrap_or(spec.image_size);
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let d = synth_dataset(&spec)?;
    let full = synth_dataset(&SynthSpec {
        held_out: Vec::new(),
        ..spec.clone()
    })?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    DatasetFile::from_examples(&d.categories, &d.train, Some(&d.train_captions))?
        .save(&out.join("train.json"))?;
    DatasetFile::from_examples(&full.categories, &full.train, Some(&full.train_captions))?
        .save(&out.join("train_full.json"))?;
    DatasetFile::from_examples(&d.categories, &d.eval, Some(&d.eval_captions))?
        .save(&out.join("eval.json"))?;
    write_json(&spec, Some(&out.join("spec.json")))?;
    eprintln!(
        "wrote {} train and {} eval images to {}",
        d.train.len(),
        d.eval.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(
    common: &Common,
    data: &Path,
    model_cfg: Option<&Path>,
    metrics: Option<&Path>,
) -> anyhow::Result<()> {
    let out = require_out(common)?;
    let cfg = train_config(common, TrainStage::Pretrain)?;
    let ds = DatasetFile::load(data)?;
    let captions = ds
        .captions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.clone()
                .ok_or_else(|| anyhow!("image {i} of {} has no caption", data.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let images: Vec<Image> = ds.examples.iter().map(|e| e.image.clone()).collect();
    let templates = PromptTemplates::default();
    let vocab = vocabulary(
        captions
            .iter()
            .map(String::as_str)
            .chain(ds.categories.iter().map(String::as_str)),
        &templates,
    );
    let model = Model::init(model_config(model_cfg)?, vocab, Stage::Pretrain, cfg.seed)?;
    let steps = cfg.steps;
    let mut t = Pretrainer::new(model, cfg, &images, &captions)?;
    let mut progress = Progress::new(metrics, steps)?;
    t.run(|m, _| progress.record(m))?;
    progress.finish()?;
    save_checkpoint(t.model(), t.step_count() as u64, out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn load_sources(
    paths: &[PathBuf],
) -> anyhow::Result<(Vec<String>, Vec<Vec<ovd_core::datapipe::FederatedExample>>)> {
    let mut categories = BTreeSet::new();
    let mut sources = Vec::new();
    for p in paths {
        let ds = DatasetFile::load(p)?;
        categories.extend(ds.categories);
        sources.push(ds.examples);
    }
    Ok((categories.into_iter().collect(), sources))
}

fn start_model(
    init: Option<&Path>,
    model_cfg: Option<&Path>,
    categories: &[String],
    cfg: &TrainConfig,
) -> anyhow::Result<Model> {
    let templates = PromptTemplates::default();
    let pretrained = init
        .map(|p| load_checkpoint(p, None))
        .transpose()?
        .map(|(m, _)| m);
    let config = match &pretrained {
        Some(m) => m.config.clone(),
        None => model_config(model_cfg)?,
    };
    let vocab = match &pretrained {
        Some(m) => m.vocab.clone(),
        None => vocabulary(categories.iter().map(String::as_str), &templates),
    };
    Ok(prepare_detector(pretrained, &config, &vocab, cfg)?)
}

fn train_detector(
    cfg: &TrainConfig,
    sources: &[Vec<ovd_core::datapipe::FederatedExample>],
    held_out: &BTreeSet<String>,
    model: Model,
    metrics: Option<&Path>,
) -> anyhow::Result<Model> {
    let prepared = prepare_sources(sources, held_out, cfg);
    let mut t = Finetuner::new(model, cfg.clone(), prepared, PromptTemplates::default())?;
    let mut progress = Progress::new(metrics, cfg.steps)?;
    t.run(|m, _| progress.record(m))?;
    progress.finish()?;
    Ok(t.into_model())
}

fn finetune(
    common: &Common,
    data: &[PathBuf],
    init: Option<&Path>,
    model_cfg: Option<&Path>,
    held_out: &[String],
    metrics: Option<&Path>,
) -> anyhow::Result<()> {
    let out = require_out(common)?;
    let cfg = train_config(common, TrainStage::Finetune)?;
    let (categories, sources) = load_sources(data)?;
    let model = start_model(init, model_cfg, &categories, &cfg)?;
    let held: BTreeSet<String> = held_out.iter().cloned().collect();
    let model = train_detector(&cfg, &sources, &held, model, metrics)?;
    save_checkpoint(&model, cfg.steps as u64, out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn eval_config(common: &Common) -> anyhow::Result<EvalConfig> {
    let cfg: EvalConfig = match &common.config {
        Some(p) => load_config(p)?,
        None => EvalConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn evaluate_cmd(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    held_out: &[String],
    pr_csv: Option<&Path>,
) -> anyhow::Result<()> {
    let (model, _) = load_detector(checkpoint)?;
    let cfg = eval_config(common)?;
    let ds = DatasetFile::load(data)?;
    let held: BTreeSet<String> = held_out.iter().cloned().collect();
    let report = evaluate(
        &model,
        &ds.examples,
        &ds.categories,
        &held,
        &PromptTemplates::default(),
        &cfg,
    )?;
    if let Some(p) = pr_csv {
        std::fs::write(p, report.pr_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_json(&report, common.out.as_deref())
}

fn detect(
    common: &Common,
    checkpoint: &Path,
    image: &Path,
    text: &[String],
    threshold: f64,
    top_k: usize,
    mode: PromptMode,
) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        bail!("--threshold must lie in [0, 1]");
    }
    let queries: Vec<String> = text
        .iter()
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if queries.is_empty() {
        bail!("--text needs at least one query");
    }
    let (model, _) = load_detector(checkpoint)?;
    let img = load_image(image)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let qs = embed_text_queries(
        &model,
        &queries,
        mode,
        &PromptTemplates::default(),
        &mut rng,
    )?;
    let dets = model.detect(&img, &qs, top_k, threshold)?;
    let resp = DetectResponse {
        detections: dets
            .into_iter()
            .map(|d| DetectionJson {
                bbox: d.bbox.corners(),
                score: d.score,
                query_index: d.query_index,
                query_name: queries[d.query_index].clone(),
            })
            .collect(),
        timing_ms: None,
    };
    write_json(&resp, common.out.as_deref())
}

fn extract_query(
    common: &Common,
    checkpoint: &Path,
    image: &Path,
    b: &[f64],
) -> anyhow::Result<()> {
    let (model, _) = load_detector(checkpoint)?;
    let img = load_image(image)?;
    if b.len() != 4 || !(b[0] < b[2] && b[1] < b[3]) {
        bail!("--box needs xmin,ymin,xmax,ymax with xmin < xmax and ymin < ymax");
    }
    let q = extract_image_query(
        &model,
        &img,
        BBox::from_corners(b[0], b[1], b[2], b[3]),
        QUERY_IOU,
    )?;
    write_json(&q, common.out.as_deref())
}

#[derive(Serialize)]
struct AblationResult {
    row: usize,
    name: String,
    ap50: f64,
    ap50_heldout: Option<f64>,
    ap: f64,
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: &Common,
    rows: &[usize],
    data: &[PathBuf],
    eval: Option<&Path>,
    init: Option<&Path>,
    model_cfg: Option<&Path>,
    held_out: &[String],
    dry_run: bool,
) -> anyhow::Result<()> {
    let base = train_config(common, TrainStage::Finetune)?;
    let matrix = ablation_matrix(&base);
    if let Some(bad) = rows.iter().find(|r| !(1..=matrix.len()).contains(*r)) {
        bail!("ablation row {bad} does not exist (1-{})", matrix.len());
    }
    let selected: Vec<_> = matrix
        .into_iter()
        .filter(|r| rows.is_empty() || rows.contains(&r.row))
        .collect();
    if dry_run {
        return write_json(&selected, common.out.as_deref());
    }
    let eval = eval.ok_or_else(|| anyhow!("--eval is required"))?;
    let (categories, sources) = load_sources(data)?;
    let eval_ds = DatasetFile::load(eval)?;
    let held: BTreeSet<String> = held_out.iter().cloned().collect();
    let templates = PromptTemplates::default();
    let mut results = Vec::new();
    for r in &selected {
        eprintln!("row {}: {}", r.row, r.name);
        let model = start_model(init, model_cfg, &categories, &r.config)?;
        let model = train_detector(&r.config, &sources, &held, model, None)?;
        let ecfg = EvalConfig {
            prompt_mode: r.config.augment.eval_prompts,
            ..EvalConfig::default()
        };
        let rep = evaluate(
            &model,
            &eval_ds.examples,
            &eval_ds.categories,
            &held,
            &templates,
            &ecfg,
        )?;
        results.push(AblationResult {
            row: r.row,
            name: r.name.clone(),
            ap50: rep.ap50,
            ap50_heldout: rep.ap50_heldout,
            ap: rep.ap,
        });
    }
    write_json(&results, common.out.as_deref())
}
