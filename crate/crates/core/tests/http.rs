//! HTTP routes against a live router.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::TestServer;
use looksync::eval::{load_csv, GenderSegment};
use looksync::service::{http, synth, Service, ServiceConfig, TaskSpec};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Fixture {
    server: TestServer,
    client: Client,
    svc: Arc<Service>,
    dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let tasks: Vec<TaskSpec> = ["CLIP ViT-H/14", "Fashion SigLIP", "DINOv2"]
        .iter()
        .enumerate()
        .map(|(i, m)| TaskSpec {
            task_id: format!("t{i}"),
            look_id: "look-7".into(),
            look_image: "/static/look-7.png".into(),
            gender: GenderSegment::Female,
            layer: "outfit".into(),
            model_id: (*m).into(),
            candidates: vec![],
        })
        .collect();
    let tasks_path = dir.path().join("tasks.json");
    std::fs::write(&tasks_path, serde_json::to_string(&tasks).unwrap()).unwrap();
    let mut cfg = ServiceConfig::default();
    cfg.embedder.dim = 32;
    cfg.server.annotation_tasks = Some(tasks_path);
    cfg.server.scores_path = Some(dir.path().join("scores.csv"));
    let svc = Arc::new(Service::from_config(cfg).unwrap());
    for p in synth::catalog(200, 4) {
        svc.ingestor().process_packet(&p).unwrap();
    }
    Fixture {
        server: TestServer::start(http::router(Arc::clone(&svc))),
        client: Client::new(),
        svc,
        dir,
    }
}

fn look_json(caption: &str) -> Value {
    json!({
        "look_id": format!("look:{caption}"),
        "image": "base64:bG9vaw==",
        "caption_sidecar": caption,
        "declared_gender": "women",
        "geography": "US",
    })
}

#[test]
fn search_route_statuses() {
    let f = fixture();
    let url = f.server.url("/v1/search");
    let ok = f.client.post(&url).json(&look_json("white cotton shirt, black denim jeans")).send().unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    let body: Value = ok.json().unwrap();
    assert_eq!(body["layers"].as_array().unwrap().len(), 2);
    assert!(body["timings"]["total_ms"].is_number());

    let bad = f.client.post(&url).body("{\"look_id\": 1}").send().unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);

    let mut over = look_json("black boots");
    over["deadline_ms"] = json!(5000);
    assert_eq!(f.client.post(&url).json(&over).send().unwrap().status(), StatusCode::BAD_REQUEST);

    let plan = f.client.post(&url).json(&look_json("something unrecognisable")).send().unwrap();
    assert_eq!(plan.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(plan.json::<Value>().unwrap()["kind"], "plan_failed");
}

#[test]
fn ingest_then_product_lookup() {
    let f = fixture();
    let packet = json!({
        "packet_id": "web-1",
        "product_id": "web-product",
        "op": "new_product",
        "raw_metadata": { "category": "Sneakers", "gender": "Women", "price": 59.5 },
        "image_ref": "base64:aW1n",
        "caption": "white leather sneakers",
        "geography": "US",
    });
    let url = f.server.url("/v1/ingest");
    let r = f.client.post(&url).json(&packet).send().unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    assert_eq!(r.json::<Value>().unwrap()["duplicate"], false);

    let product = f.server.url("/v1/product/web-product");
    let end = Instant::now() + Duration::from_secs(5);
    let rec: Value = loop {
        let r = f.client.get(&product).send().unwrap();
        if r.status() == StatusCode::OK {
            break r.json().unwrap();
        }
        assert!(Instant::now() < end, "product never became visible");
        std::thread::sleep(Duration::from_millis(10));
    };
    assert_eq!(rec["attrs"]["category"], "footwear");
    assert_eq!(rec["raw_metadata"]["price"], "59.5");

    let again = f.client.post(&url).json(&packet).send().unwrap();
    assert_eq!(again.status(), StatusCode::ACCEPTED);
    assert_eq!(again.json::<Value>().unwrap()["duplicate"], true);

    let mut no_image = packet.clone();
    no_image["packet_id"] = json!("web-2");
    no_image.as_object_mut().unwrap().remove("image_ref");
    assert_eq!(f.client.post(&url).json(&no_image).send().unwrap().status(), StatusCode::BAD_REQUEST);
    assert_eq!(
        f.client.get(f.server.url("/v1/product/nope")).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
}

#[test]
fn health_and_metrics() {
    let f = fixture();
    let h: Value = f.client.get(f.server.url("/healthz")).send().unwrap().json().unwrap();
    assert_eq!(h["ok"], true);
    assert_eq!(h["index_size"], 200);
    let text = f.client.get(f.server.url("/metrics")).send().unwrap().text().unwrap();
    assert!(text.contains("looksync_requests_total 0"), "{text}");
    assert!(text.contains("looksync_index_size 200"));
    f.client
        .post(f.server.url("/v1/search"))
        .json(&look_json("black boots"))
        .send()
        .unwrap();
    let text = f.client.get(f.server.url("/metrics")).send().unwrap().text().unwrap();
    assert!(text.contains("looksync_requests_total 1"), "{text}");
}

/// A scripted three-task annotation session through the public routes.
#[test]
fn annotation_session() {
    let f = fixture();
    let next = f.server.url("/v1/annotation/next?annotator=judge-1");
    assert_eq!(
        f.client.get(f.server.url("/v1/annotation/next")).send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    let mut labels = Vec::new();
    for score in [5, 3, 4] {
        let task: Value = f.client.get(&next).send().unwrap().json().unwrap();
        let text = task.to_string();
        for model in ["CLIP", "SigLIP", "DINO"] {
            assert!(!text.contains(model), "model identity leaked: {text}");
        }
        let label = task["model_id"].as_str().unwrap().to_owned();
        assert!(label.starts_with("System "));
        labels.push(label.clone());
        let rec = json!({
            "annotator_id": "judge-1",
            "gender": task["gender_segment"],
            "model_id": label,
            "look_id": task["look"]["look_id"],
            "layer": task["layer"],
            "score": score,
        });
        let r = f.client.post(f.server.url("/v1/mos")).json(&rec).send().unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
    }
    labels.sort();
    assert_eq!(labels, ["System A", "System B", "System C"]);
    let done: Value = f.client.get(&next).send().unwrap().json().unwrap();
    assert_eq!(done, json!({ "done": true }));

    let stored = load_csv(&f.dir.path().join("scores.csv")).unwrap();
    assert_eq!(stored.len(), 3);
    let mut models: Vec<&str> = stored.iter().map(|r| r.model_id.as_str()).collect();
    models.sort();
    assert_eq!(models, ["CLIP ViT-H/14", "DINOv2", "Fashion SigLIP"]);
    assert_eq!(f.svc.scores().len(), 3);
    let report = looksync::eval::aggregate(&stored);
    assert_eq!(report.cells.len(), 3);
}

#[test]
fn mos_rejects_invalid_scores() {
    let f = fixture();
    for score in [0, 6, 7] {
        let rec = json!({
            "annotator_id": "a",
            "gender": "male",
            "model_id": "CLIP ViT-H/14",
            "look_id": "l",
            "layer": "outfit",
            "score": score,
        });
        let r = f.client.post(f.server.url("/v1/mos")).json(&rec).send().unwrap();
        assert_eq!(r.status(), StatusCode::BAD_REQUEST, "score {score}");
    }
    let missing = json!({ "annotator_id": "a", "score": 3 });
    assert_eq!(
        f.client.post(f.server.url("/v1/mos")).json(&missing).send().unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(f.svc.scores().len(), 0);
}
