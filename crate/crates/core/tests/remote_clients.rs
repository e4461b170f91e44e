//! Remote clients against mock servers.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use common::TestServer;
use looksync::embedding::{EmbedError, Embedder, HashEmbedder, RemoteEmbedder};
use looksync::image::ImageRef;
use looksync::querygen::{
    generate_queries, LayerKey, LookDescriptor, PromptTemplate, QueryGenError, RemoteGenerator,
};
use looksync::rerank::{
    JudgeCandidate, JudgeClient, JudgeError, LookImage, RemoteJudge, RemoteSegmenter, SegmenterClient,
    SegmenterError,
};
use looksync::service::{Service, ServiceConfig};
use parking_lot::Mutex;
use serde_json::{json, Value};

type Log = Arc<Mutex<Vec<Value>>>;

fn look() -> LookDescriptor {
    LookDescriptor {
        look_id: "l1".into(),
        image: ImageRef::inline(b"look"),
        caption_sidecar: Some("black jeans".into()),
        declared_gender: None,
        geography: String::new(),
        user_prefs: None,
    }
}

fn look_image() -> LookImage {
    LookImage {
        look_id: "l1".into(),
        image: Arc::from(&b"look"[..]),
        caption: None,
    }
}

#[test]
fn embedder_round_trip_and_failures() {
    let app = Router::new()
        .route(
            "/ok",
            post(|Json(body): Json<Value>| async move {
                assert!(body["kind"] == "text" || body["kind"] == "image", "{body}");
                Json(json!({ "dim": 4, "values": [3.0, 0.0, 4.0, 0.0] }))
            }),
        )
        .route("/wrong-dim", post(|| async { Json(json!({ "dim": 3, "values": [1.0, 0.0, 0.0] })) }))
        .route(
            "/slow",
            post(|| async {
                tokio::time::sleep(Duration::from_millis(500)).await;
                Json(json!({ "dim": 4, "values": [1.0, 0.0, 0.0, 0.0] }))
            }),
        )
        .route("/down", post(|| async { StatusCode::INTERNAL_SERVER_ERROR }));
    let server = TestServer::start(app);
    let client = |path: &str| RemoteEmbedder::new(server.url(path), 4, Duration::from_millis(150), 4);

    let v = client("/ok").embed_text("black jeans").unwrap();
    assert_eq!(v.as_slice(), &[0.6, 0.0, 0.8, 0.0]);
    assert!(client("/ok").embed_image(b"png", None).is_ok());
    assert!(matches!(client("/ok").embed_text("  "), Err(EmbedError::EmptyQuery)));
    assert!(matches!(
        client("/wrong-dim").embed_text("x"),
        Err(EmbedError::DimensionMismatch { expected: 4, got: 3 })
    ));
    let t = Instant::now();
    assert!(matches!(client("/slow").embed_text("x"), Err(EmbedError::RemoteTimeout)));
    assert!(t.elapsed() < Duration::from_millis(450));
    assert!(matches!(client("/down").embed_text("x"), Err(EmbedError::RemoteUnavailable(_))));
}

#[test]
fn generator_repair_round_trip() {
    let log: Log = Arc::default();
    let app = Router::new()
        .route(
            "/gen",
            post(|State(log): State<Log>, Json(body): Json<Value>| async move {
                let first = body.get("violations").is_none();
                log.lock().push(body);
                if first {
                    Json(json!({ "layers": { "sleeves": "long", "bottomwear": "black jeans" } }))
                } else {
                    Json(json!({ "layers": { "bottomwear": "black jeans" } }))
                }
            }),
        )
        .with_state(Arc::clone(&log));
    let server = TestServer::start(app);
    let gen = Arc::new(RemoteGenerator::new(server.url("/gen"), Duration::from_secs(2), 2));
    let plan = generate_queries(&look(), Arc::from(&b"look"[..]), gen, Arc::new(PromptTemplate::default()), None)
        .unwrap();
    assert_eq!(plan.get(LayerKey::Bottomwear), Some("black jeans"));
    let calls = log.lock();
    assert_eq!(calls.len(), 2);
    assert_eq!(calls[0]["prompt_version"], "prompt_v1");
    assert!(calls[1]["violations"][0].as_str().unwrap().contains("sleeves"));
}

#[test]
fn generator_down_is_fatal() {
    let server = TestServer::start(Router::new().route("/gen", post(|| async { StatusCode::BAD_GATEWAY })));
    let gen = Arc::new(RemoteGenerator::new(server.url("/gen"), Duration::from_secs(2), 2));
    let err = generate_queries(&look(), Arc::from(&b"x"[..]), gen, Arc::new(PromptTemplate::default()), None)
        .unwrap_err();
    assert!(matches!(err, QueryGenError::GeneratorUnavailable(_)), "{err:?}");
}

#[test]
fn judge_round_trip_and_failures() {
    let app = Router::new()
        .route(
            "/judge",
            post(|Json(body): Json<Value>| async move {
                let scores: BTreeMap<String, f32> = body["candidates"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c["id"].as_str().unwrap().to_owned(), i as f32))
                    .collect();
                Json(json!({ "scores": scores }))
            }),
        )
        .route("/garbage", post(|| async { "not json" }))
        .route(
            "/slow",
            post(|| async {
                tokio::time::sleep(Duration::from_millis(500)).await;
                Json(json!({ "scores": {} }))
            }),
        );
    let server = TestServer::start(app);
    let cands: Vec<JudgeCandidate> = ["a", "b"]
        .iter()
        .map(|id| JudgeCandidate {
            id: (*id).into(),
            metadata: json!({ "caption": id }),
        })
        .collect();
    let judge = |p: &str| RemoteJudge::new(server.url(p), Duration::from_millis(150), 2);
    let scores = judge("/judge").judge(&look_image(), &cands).unwrap();
    assert_eq!(scores["b"], 1.0);
    assert!(matches!(judge("/garbage").judge(&look_image(), &cands), Err(JudgeError::InvalidJudgment(_))));
    assert!(matches!(judge("/slow").judge(&look_image(), &cands), Err(JudgeError::Timeout)));
}

#[test]
fn segmenter_round_trip_and_failures() {
    let app = Router::new()
        .route(
            "/seg",
            post(|Json(body): Json<Value>| async move {
                assert_eq!(body["layer"], "footwear");
                Json(json!({ "crop_b64": "Y3JvcA==" }))
            }),
        )
        .route("/bad", post(|| async { Json(json!({ "crop_b64": "***" })) }));
    let server = TestServer::start(app);
    let seg = |p: &str| RemoteSegmenter::new(server.url(p), Duration::from_secs(1), 2);
    let crop = seg("/seg").segment(&look_image(), LayerKey::Footwear).unwrap();
    assert_eq!(crop.image, b"crop");
    assert!(matches!(
        seg("/bad").segment(&look_image(), LayerKey::Footwear),
        Err(SegmenterError::Unavailable(_))
    ));
}

/// The whole service wired to remote generator, judge and segmenter.
#[test]
fn service_with_remote_clients() {
    let embedder = HashEmbedder::new(32);
    let app = Router::new()
        .route(
            "/gen",
            post(|| async { Json(json!({ "layers": { "footwear": "white leather sneakers" } })) }),
        )
        .route(
            "/judge",
            post(|Json(body): Json<Value>| async move {
                // Prefers the lexicographically last id.
                let mut ids: Vec<String> = body["candidates"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| c["id"].as_str().unwrap().to_owned())
                    .collect();
                ids.sort();
                let scores: BTreeMap<String, f32> =
                    ids.into_iter().enumerate().map(|(i, id)| (id, i as f32)).collect();
                Json(json!({ "scores": scores }))
            }),
        )
        .route("/seg", post(|| async { StatusCode::SERVICE_UNAVAILABLE }));
    let server = TestServer::start(app);
    let mut cfg = ServiceConfig::default();
    cfg.embedder.dim = embedder.dim();
    cfg.clients.generator_endpoint = Some(server.url("/gen"));
    cfg.clients.judge_endpoint = Some(server.url("/judge"));
    cfg.clients.segmenter_endpoint = Some(server.url("/seg"));
    let svc = Service::from_config(cfg).unwrap();
    for p in looksync::service::synth::catalog(300, 9) {
        svc.ingestor().process_packet(&p).unwrap();
    }
    let resp = svc.handle_search(&look().into()).unwrap();
    assert_eq!(resp.layers.len(), 1);
    let layer = &resp.layers[0];
    assert_eq!(layer.layer_key, LayerKey::Footwear);
    assert!(!layer.degraded);
    let ids: Vec<&str> = layer.products.iter().map(|p| p.product_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort_by(|a, b| b.cmp(a));
    assert_eq!(ids, sorted);
}
