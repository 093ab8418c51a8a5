//! JSON-over-HTTP inference service.
//!
//! Routes:
//!
//! | method | path                | body                                   |
//! |--------|---------------------|----------------------------------------|
//! | POST   | `/v1/detect`        | [`DetectRequest`] → [`DetectResponse`] |
//! | POST   | `/v1/queries/text`  | [`TextQueryRequest`]                   |
//! | POST   | `/v1/queries/image` | [`ImageQueryRequest`]                  |
//! | GET    | `/v1/model`         | model configuration                    |
//! | GET    | `/v1/health`        | `{"status":"ok"}`                      |
//!
//! The model is loaded once and never changes. Query embeddings can be
//! registered once and referenced by handle from later detect calls. A
//! handle is derived from the embedding bits, so equal queries get equal
//! handles.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

use ovd_core::boxes::BBox;
use ovd_core::datapipe::{decode_png_base64, PromptMode, PromptTemplates};
use ovd_core::imaging::Image;
use ovd_core::model::{rank_in_image_frame, Model, Stage};
use ovd_core::query::{
    check_query_box, embed_text_queries, fewshot_from_patches, select_query_token, ImageQuery,
    QueryEntry, QueryOrigin, QuerySet, FALLBACK_QUERY, QUERY_IOU,
};

#[derive(Clone, Debug)]
pub struct ServeConfig {
    /// Simultaneous forward passes.
    pub workers: usize,
    /// Largest accepted image side in pixels.
    pub max_image_side: usize,
    /// Largest accepted request body in bytes.
    pub max_body_bytes: usize,
    /// Registered query handles kept before new ones are refused.
    pub max_handles: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_image_side: 1024,
            max_body_bytes: 8 << 20,
            max_handles: 10_000,
        }
    }
}

struct AppState {
    model: Model,
    step: u64,
    templates: PromptTemplates,
    cfg: ServeConfig,
    pool: Semaphore,
    handles: Mutex<HashMap<String, QueryEntry>>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    TooLarge(String),
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_id: Option<String>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message, error_id) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "validation", m, None),
            ApiError::TooLarge(m) => (StatusCode::PAYLOAD_TOO_LARGE, "too_large", m, None),
            ApiError::Internal(m) => {
                let id = uuid::Uuid::new_v4().to_string();
                eprintln!("internal error {id}: {m}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "internal",
                    "internal error".to_string(),
                    Some(id),
                )
            }
        };
        let body = ErrorBody {
            error: kind.to_string(),
            message,
            error_id,
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge(r.body_text())
        } else {
            ApiError::BadRequest(r.body_text())
        }
    }
}

impl From<ovd_core::Error> for ApiError {
    fn from(e: ovd_core::Error) -> Self {
        use ovd_core::Error as E;
        match e {
            E::InvalidData(_) | E::Image(_) | E::Empty(_) | E::Config(_) => {
                ApiError::BadRequest(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageQuerySpec {
    /// Base64 PNG.
    pub image: String,
    /// `[xmin, ymin, xmax, ymax]`, normalized to the image.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Specs sharing a group are averaged into one few-shot query.
    #[serde(default)]
    pub group: Option<String>,
}

fn default_threshold() -> f64 {
    0.1
}

fn default_top_k() -> usize {
    100
}

fn default_mode() -> PromptMode {
    PromptMode::Eval
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: String,
    #[serde(default)]
    pub text_queries: Vec<String>,
    #[serde(default)]
    pub image_queries: Vec<ImageQuerySpec>,
    /// Handles returned by the `/v1/queries/*` routes.
    #[serde(default)]
    pub query_handles: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_mode")]
    pub prompt_mode: PromptMode,
    /// Report server-side latency. Off by default so equal requests give equal bodies.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionJson {
    /// `[xmin, ymin, xmax, ymax]`, normalized to the image.
    pub bbox: [f64; 4],
    pub score: f64,
    pub query_index: usize,
    pub query_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<DetectionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextQueryRequest {
    pub categories: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHandle {
    pub name: String,
    pub handle: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQueryResponse {
    pub queries: Vec<QueryHandle>,
    pub dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageQueryRequest {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQueryResponse {
    pub handle: String,
    /// No prediction overlapped the box; the generic object query was used.
    pub fallback: bool,
    pub token: Option<usize>,
    pub embedding: Vec<f64>,
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    config: &'a ovd_core::model::ModelConfig,
    stage: Stage,
    step: u64,
    vocab_size: usize,
    vocab_hash: String,
    parameters: usize,
}

/// Routes over an immutable `model` snapshot.
pub fn router(model: Model, step: u64, cfg: ServeConfig) -> ovd_core::Result<Router> {
    if model.stage != Stage::Detection {
        return Err(ovd_core::Error::Config(
            "the service needs a detection checkpoint".into(),
        ));
    }
    let body_limit = cfg.max_body_bytes;
    let state = Arc::new(AppState {
        pool: Semaphore::new(cfg.workers.max(1)),
        model,
        step,
        templates: PromptTemplates::default(),
        cfg,
        handles: Mutex::new(HashMap::new()),
    });
    Ok(Router::new()
        .route("/v1/health", get(health))
        .route("/v1/model", get(model_info))
        .route("/v1/detect", post(detect))
        .route("/v1/queries/text", post(text_queries))
        .route("/v1/queries/image", post(image_query))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state))
}

/// Serves until the process is stopped.
pub async fn serve(
    model: Model,
    step: u64,
    cfg: ServeConfig,
    addr: std::net::SocketAddr,
) -> anyhow::Result<()> {
    let app = router(model, step, cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

async fn model_info(State(s): State<Arc<AppState>>) -> Response {
    let m = &s.model;
    Json(ModelInfo {
        config: &m.config,
        stage: m.stage,
        step: s.step,
        vocab_size: m.vocab.len(),
        vocab_hash: m.vocab.hash(),
        parameters: m.params.iter().map(|(_, t)| t.len()).sum(),
    })
    .into_response()
}

/// Runs `f` on the blocking pool once a worker slot is free.
async fn run_model<T: Send + 'static>(
    s: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = s
        .pool
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let s = Arc::clone(s);
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn decode_image(s: &AppState, text: &str) -> Result<Image, ApiError> {
    let image = decode_png_base64(text)?;
    let side = image.height.max(image.width);
    if side > s.cfg.max_image_side {
        return Err(ApiError::TooLarge(format!(
            "image side {side} exceeds the limit of {}",
            s.cfg.max_image_side
        )));
    }
    Ok(image)
}

fn parse_box(b: [f64; 4]) -> Result<BBox, ApiError> {
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(ApiError::BadRequest(format!(
            "box {b:?} needs xmin < xmax and ymin < ymax"
        )));
    }
    let bbox = BBox::from_corners(b[0], b[1], b[2], b[3]);
    check_query_box(bbox)?;
    Ok(bbox)
}

/// Stable identifier of an embedding: hash of its name, origin and bits.
fn handle_of(entry: &QueryEntry) -> String {
    let mut h = Sha256::new();
    h.update(entry.name.as_bytes());
    h.update([u8::from(entry.origin == QueryOrigin::Image)]);
    for e in &entry.embeddings {
        for v in e {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

fn register(s: &AppState, entry: QueryEntry) -> Result<String, ApiError> {
    let handle = handle_of(&entry);
    let mut map = s
        .handles
        .lock()
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    if !map.contains_key(&handle) && map.len() >= s.cfg.max_handles {
        return Err(ApiError::TooLarge("query handle store is full".into()));
    }
    map.insert(handle.clone(), entry);
    Ok(handle)
}

fn image_query_embedding(
    s: &AppState,
    image: &Image,
    bbox: BBox,
) -> Result<(Vec<f64>, bool, Option<usize>), ApiError> {
    let out = s.model.analyze(image)?;
    match select_query_token(&out, image.height, image.width, bbox, QUERY_IOU) {
        Some((token, e)) => Ok((e, false, Some(token))),
        None => Ok((
            s.model.embed_texts(&[FALLBACK_QUERY])?.row(0).to_vec(),
            true,
            None,
        )),
    }
}

async fn text_queries(
    State(s): State<Arc<AppState>>,
    body: Result<Json<TextQueryRequest>, JsonRejection>,
) -> ApiResult<TextQueryResponse> {
    let Json(req) = body?;
    if req.categories.is_empty() || req.categories.iter().any(|c| c.trim().is_empty()) {
        return Err(ApiError::BadRequest(
            "categories must be nonempty strings".into(),
        ));
    }
    let resp = run_model(&s, move |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = embed_text_queries(&s.model, &req.categories, req.mode, &s.templates, &mut rng)?;
        let dim = qs.dim();
        let queries = qs
            .entries()
            .iter()
            .map(|e| {
                Ok(QueryHandle {
                    name: e.name.clone(),
                    handle: register(s, e.clone())?,
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(TextQueryResponse { queries, dim })
    })
    .await?;
    Ok(Json(resp))
}

async fn image_query(
    State(s): State<Arc<AppState>>,
    body: Result<Json<ImageQueryRequest>, JsonRejection>,
) -> ApiResult<ImageQueryResponse> {
    let Json(req) = body?;
    let bbox = parse_box(req.bbox)?;
    let resp = run_model(&s, move |s| {
        let image = decode_image(s, &req.image)?;
        let (embedding, fallback, token) = image_query_embedding(s, &image, bbox)?;
        let name = format!("image query {:?}", req.bbox);
        let handle = register(
            s,
            QueryEntry::single(name, QueryOrigin::Image, embedding.clone()),
        )?;
        Ok(ImageQueryResponse {
            handle,
            fallback,
            token,
            embedding,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn detect(
    State(s): State<Arc<AppState>>,
    body: Result<Json<DetectRequest>, JsonRejection>,
) -> ApiResult<DetectResponse> {
    let start = Instant::now();
    let Json(req) = body?;
    if !(0.0..=1.0).contains(&req.threshold) {
        return Err(ApiError::BadRequest(format!(
            "threshold {} is outside [0, 1]",
            req.threshold
        )));
    }
    if req.top_k == 0 {
        return Err(ApiError::BadRequest("top_k must be positive".into()));
    }
    if req.text_queries.is_empty() && req.image_queries.is_empty() && req.query_handles.is_empty() {
        return Err(ApiError::BadRequest(
            "at least one query is required".into(),
        ));
    }
    if req.text_queries.iter().any(|q| q.trim().is_empty()) {
        return Err(ApiError::BadRequest("text queries must be nonempty".into()));
    }
    let boxes = req
        .image_queries
        .iter()
        .map(|q| parse_box(q.bbox))
        .collect::<Result<Vec<_>, _>>()?;
    let timing = req.timing;
    let mut resp = run_model(&s, move |s| detect_blocking(s, &req, &boxes)).await?;
    if timing {
        resp.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Json(resp))
}

fn detect_blocking(
    s: &AppState,
    req: &DetectRequest,
    boxes: &[BBox],
) -> Result<DetectResponse, ApiError> {
    let image = decode_image(s, &req.image)?;
    let mut entries = Vec::new();
    if !req.text_queries.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = embed_text_queries(
            &s.model,
            &req.text_queries,
            req.prompt_mode,
            &s.templates,
            &mut rng,
        )?;
        entries.extend(qs.entries().iter().cloned());
    }
    let mut groups: BTreeMap<String, (usize, Vec<ImageQuery>)> = BTreeMap::new();
    let mut singles = Vec::new();
    for (i, (q, b)) in req.image_queries.iter().zip(boxes).enumerate() {
        let qi = decode_image(s, &q.image)?;
        let (embedding, fallback, token) = image_query_embedding(s, &qi, *b)?;
        match &q.group {
            Some(g) => groups
                .entry(g.clone())
                .or_insert_with(|| (i, Vec::new()))
                .1
                .push(ImageQuery {
                    embedding,
                    fallback,
                    token,
                }),
            None => singles.push((i, format!("image query {i}"), embedding)),
        }
    }
    for (g, (first, patches)) in groups {
        singles.push((first, g, fewshot_from_patches(&patches)?));
    }
    singles.sort_by_key(|t| t.0);
    entries.extend(
        singles
            .into_iter()
            .map(|(_, name, e)| QueryEntry::single(name, QueryOrigin::Image, e)),
    );
    {
        let map = s
            .handles
            .lock()
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        for h in &req.query_handles {
            let e = map
                .get(h)
                .ok_or_else(|| ApiError::BadRequest(format!("unknown query handle {h:?}")))?;
            entries.push(e.clone());
        }
    }
    let qs = QuerySet::new(entries)?;
    let out = s.model.analyze(&image)?;
    let dets = rank_in_image_frame(
        &out,
        image.height,
        image.width,
        &qs,
        req.top_k,
        req.threshold,
    )?;
    let names = qs.names();
    Ok(DetectResponse {
        detections: dets
            .into_iter()
            .map(|d| DetectionJson {
                bbox: d.bbox.corners(),
                score: d.score,
                query_index: d.query_index,
                query_name: names[d.query_index].to_string(),
            })
            .collect(),
        timing_ms: None,
    })
}
