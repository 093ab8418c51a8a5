//! Repeatability of training, checkpoints and the service.

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::json;
use tower::ServiceExt;

use ovd::server::{router, ServeConfig};
use ovd_core::checkpoint::{from_bytes, to_bytes};
use ovd_core::datapipe::{encode_png_base64, synth_dataset, PromptTemplates, SynthSpec};
use ovd_core::encoders::{EncoderConfig, Vocabulary};
use ovd_core::head::HeadConfig;
use ovd_core::model::{Model, ModelConfig};
use ovd_core::train::{prepare_detector, prepare_sources, Finetuner, TrainConfig};
use ovd_core::Result;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 8,
            depth: 1,
            width: 32,
            n_heads: 2,
            mlp_dim: 64,
            text_depth: 1,
            text_width: 32,
            text_heads: 2,
            text_mlp_dim: 64,
            ..EncoderConfig::default()
        },
        head: HeadConfig::default(),
    }
}

fn trace(steps: usize, seed: u64) -> Result<(Vec<u64>, Model)> {
    let d = synth_dataset(&SynthSpec {
        n_train: 64,
        n_eval: 0,
        seed,
        ..SynthSpec::default()
    })?;
    let t = PromptTemplates::default();
    let vocab = Vocabulary::build(t.all().chain(d.categories.iter().map(String::as_str)));
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        seed,
        require_pretrained: false,
        ..TrainConfig::default()
    };
    let model = prepare_detector(None, &small_config(), &vocab, &cfg)?;
    let sources = prepare_sources(
        &[d.train.clone(), d.train[..16].to_vec()],
        &d.held_out,
        &cfg,
    );
    let mut tr = Finetuner::new(model, cfg, sources, t)?;
    let log = tr.run(|_, _| Ok(()))?;
    Ok((
        log.iter().map(|m| m.loss.to_bits()).collect(),
        tr.into_model(),
    ))
}

pub struct TraceReport {
    pub steps: usize,
    pub identical: bool,
    pub final_model: Model,
}

/// Two fine-tuning runs with every augmentation on, compared bit for bit.
pub fn training_traces(steps: usize, seed: u64) -> Result<TraceReport> {
    let (a, ma) = trace(steps, seed)?;
    let (b, mb) = trace(steps, seed)?;
    Ok(TraceReport {
        steps: a.len(),
        identical: a == b && ma.params == mb.params,
        final_model: ma,
    })
}

/// Serialize, load and serialize again. The stored values are `f32`, so the
/// loaded parameters must equal the originals rounded to `f32`.
pub fn checkpoint_round_trip(model: &Model) -> Result<bool> {
    let first = to_bytes(model, 100)?;
    let (loaded, step) = from_bytes(&first, None)?;
    let second = to_bytes(&loaded, step)?;
    let values_match = model.params.iter().all(|(name, t)| {
        loaded.params.get(name).is_some_and(|u| {
            u.shape() == t.shape()
                && t.data()
                    .iter()
                    .zip(u.data())
                    .all(|(&x, &y)| f64::from(x as f32).to_bits() == y.to_bits())
        })
    }) && loaded.params.len() == model.params.len();
    Ok(step == 100 && first == second && values_match && loaded.stage == model.stage)
}

/// Fires `copies` identical requests at once for each endpoint and checks
/// that every response body is the same.
pub fn concurrent_bodies(model: Model, copies: usize) -> Result<bool> {
    let d = synth_dataset(&SynthSpec {
        n_train: 2,
        n_eval: 0,
        ..SynthSpec::default()
    })?;
    let png = encode_png_base64(&d.train[0].image)?;
    let app = router(
        model,
        100,
        ServeConfig {
            workers: 4,
            ..ServeConfig::default()
        },
    )?;
    let requests = [
        (
            "/v1/detect",
            json!({"image": png, "text_queries": ["red circle", "blue cross"], "threshold": 0.0, "top_k": 25}),
        ),
        (
            "/v1/queries/text",
            json!({"categories": ["green square", "yellow triangle"]}),
        ),
        (
            "/v1/queries/image",
            json!({"image": png, "box": [0.0, 0.0, 0.5, 0.5]}),
        ),
    ];
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| ovd_core::Error::io("<runtime>", e))?;
    rt.block_on(async move {
        for (uri, body) in requests {
            let mut handles = Vec::with_capacity(copies);
            for _ in 0..copies {
                let req = Request::builder()
                    .method("POST")
                    .uri(uri)
                    .header("content-type", "application/json")
                    .body(Body::from(body.to_string()))
                    .expect("valid request");
                let app = app.clone();
                handles.push(tokio::spawn(async move {
                    let resp = app.oneshot(req).await.expect("infallible service");
                    let ok = resp.status().is_success();
                    let bytes = resp
                        .into_body()
                        .collect()
                        .await
                        .map(|b| b.to_bytes().to_vec())
                        .unwrap_or_default();
                    (ok, bytes)
                }));
            }
            let mut bodies = Vec::with_capacity(copies);
            for h in handles {
                bodies.push(h.await.expect("request task"));
            }
            if bodies
                .iter()
                .any(|(ok, b)| !ok || b.is_empty() || *b != bodies[0].1)
            {
                return Ok(false);
            }
        }
        Ok(true)
    })
}
