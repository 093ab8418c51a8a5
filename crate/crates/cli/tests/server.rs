mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ovd::server::{router, DetectResponse, ImageQueryResponse, ServeConfig, TextQueryResponse};
use ovd_core::datapipe::encode_png_base64;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    let cfg = ServeConfig {
        workers: 2,
        max_image_side: 64,
        ..ServeConfig::default()
    };
    router(common::tiny_detector(), 7, cfg).unwrap()
}

fn png(side: usize) -> String {
    encode_png_base64(&common::test_image(side)).unwrap()
}

async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Some(body.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap())
}

#[tokio::test]
async fn health_reports_ok() {
    let (s, b) = call(&app(), "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<Value>(&b).unwrap(),
        json!({"status": "ok"})
    );
}

#[tokio::test]
async fn model_endpoint_describes_the_snapshot() {
    let (s, b) = call(&app(), "GET", "/v1/model", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["stage"], "detection");
    assert_eq!(v["step"], 7);
    assert_eq!(v["config"]["encoder"]["image_size"], 16);
}

#[tokio::test]
async fn detect_returns_sorted_boxes_in_the_unit_square() {
    let app = app();
    let (s, v) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "text_queries": ["red circle", "blue square"], "threshold": 0.0, "top_k": 10}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: DetectResponse = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(r.detections.len(), 10);
    assert!(r.timing_ms.is_none() && v.get("timing_ms").is_none());
    assert!(r.detections.windows(2).all(|w| w[0].score >= w[1].score));
    for d in &r.detections {
        assert!(d.bbox.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!(d.bbox[0] <= d.bbox[2] && d.bbox[1] <= d.bbox[3]);
        assert_eq!(d.query_name, ["red circle", "blue square"][d.query_index]);
    }
}

#[tokio::test]
async fn timing_is_opt_in() {
    let (s, v) = post(
        &app(),
        "/v1/detect",
        json!({"image": png(16), "text_queries": ["red circle"], "timing": true}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["timing_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn threshold_above_one_is_rejected() {
    let (s, v) = post(
        &app(),
        "/v1/detect",
        json!({"image": png(16), "text_queries": ["red circle"], "threshold": 1.1}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "validation");
}

#[tokio::test]
async fn malformed_json_is_a_bad_request() {
    let (s, _) = call(&app(), "POST", "/v1/detect", Some("{\"image\": ".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app(), "/v1/detect", json!({"text_queries": ["x"]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(
        &app(),
        "/v1/detect",
        json!({"image": "not base64!", "text_queries": ["x"]}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_images_are_refused() {
    let (s, v) = post(
        &app(),
        "/v1/detect",
        json!({"image": png(80), "text_queries": ["red circle"]}),
    )
    .await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"], "too_large");
    let small = router(
        common::tiny_detector(),
        0,
        ServeConfig {
            max_body_bytes: 64,
            ..ServeConfig::default()
        },
    )
    .unwrap();
    let (s, _) = post(
        &small,
        "/v1/detect",
        json!({"image": png(16), "text_queries": ["red circle"]}),
    )
    .await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn concurrent_identical_requests_get_identical_bodies() {
    let app = app();
    let body =
        json!({"image": png(16), "text_queries": ["red circle", "green cross"], "threshold": 0.0})
            .to_string();
    let (a, b) = tokio::join!(
        call(&app, "POST", "/v1/detect", Some(body.clone())),
        call(&app, "POST", "/v1/detect", Some(body.clone()))
    );
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    assert_eq!(call(&app, "POST", "/v1/detect", Some(body)).await, a);
}

#[tokio::test]
async fn tiny_query_box_falls_back_to_the_generic_query() {
    let (s, v) = post(
        &app(),
        "/v1/queries/image",
        json!({"image": png(16), "box": [0.0, 0.0, 0.02, 0.02]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: ImageQueryResponse = serde_json::from_value(v).unwrap();
    assert!(r.fallback);
    assert!(r.token.is_none());
}

#[tokio::test]
async fn handles_are_reusable_and_stable() {
    let app = app();
    let (s, v) = post(
        &app,
        "/v1/queries/text",
        json!({"categories": ["red circle"], "mode": "single"}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let r: TextQueryResponse = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(r.dim, 16);
    let (_, again) = post(
        &app,
        "/v1/queries/text",
        json!({"categories": ["red circle"], "mode": "single"}),
    )
    .await;
    assert_eq!(v, again);
    let handle = r.queries[0].handle.clone();

    let (s, iq) = post(
        &app,
        "/v1/queries/image",
        json!({"image": png(16), "box": [0.2, 0.2, 0.55, 0.55]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let iq: ImageQueryResponse = serde_json::from_value(iq).unwrap();

    let (s, by_handle) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "query_handles": [handle, iq.handle], "threshold": 0.0, "top_k": 5}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{by_handle}");
    let (_, by_text) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "text_queries": ["red circle"], "prompt_mode": "single", "threshold": 0.0, "top_k": 5}),
    )
    .await;
    let first = |v: &Value| {
        v["detections"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|d| d["query_index"] == 0)
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(first(&by_handle).first(), first(&by_text).first());

    let (s, _) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "query_handles": ["nope"]}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn grouped_image_queries_form_one_query() {
    let app = app();
    let spec = |b: [f64; 4]| json!({"image": png(16), "box": b, "group": "shape"});
    let (s, v) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "image_queries": [spec([0.2, 0.2, 0.55, 0.55]), spec([0.0, 0.0, 0.5, 0.5])], "threshold": 0.0}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: DetectResponse = serde_json::from_value(v).unwrap();
    assert!(r
        .detections
        .iter()
        .all(|d| d.query_index == 0 && d.query_name == "shape"));
    let (s, _) = post(
        &app,
        "/v1/detect",
        json!({"image": png(16), "image_queries": [{"image": png(16), "box": [0.5, 0.5, 0.2, 0.9]}]}),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[test]
fn pretraining_checkpoints_are_not_served() {
    let m = common::tiny_detector();
    let mut pre = m.clone();
    pre.stage = ovd_core::model::Stage::Pretrain;
    assert!(router(pre, 0, ServeConfig::default()).is_err());
}
