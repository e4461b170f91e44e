use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::*;
use crate::attributes::Gender;
use crate::image::ImageRef;
use crate::attributes::AttributePredicate;
use crate::ingest::PacketOp;
use crate::querygen::{LayerKey, LookDescriptor};
use crate::rerank::fault::JudgeFault;
use crate::rerank::RerankMethod;

const DIM: usize = 64;

fn cfg() -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.embedder.dim = DIM;
    c.server.ingest_workers = 2;
    c
}

fn empty_service(cfg: ServiceConfig) -> Service {
    Service::from_config(cfg).unwrap()
}

fn packet(i: usize, caption: &str, category: &str, gender: &str) -> UpdatePacket {
    let mut raw = BTreeMap::new();
    raw.insert("category".into(), category.into());
    raw.insert("gender".into(), gender.into());
    raw.insert("brand".into(), "Calder".into());
    raw.insert("price".into(), "49.00".into());
    UpdatePacket {
        packet_id: format!("p{i}"),
        product_id: format!("prod{i}"),
        op: PacketOp::NewProduct,
        raw_metadata: raw,
        image_ref: Some(ImageRef::inline(format!("img{i}").as_bytes())),
        caption: Some(caption.into()),
        geography: "US".into(),
    }
}

fn look(caption: &str, gender: Option<Gender>) -> LookDescriptor {
    LookDescriptor {
        look_id: format!("look:{caption}"),
        image: ImageRef::inline(b"look"),
        caption_sidecar: Some(caption.into()),
        declared_gender: gender,
        geography: "US".into(),
        user_prefs: None,
    }
}

/// Applies packets synchronously through the service's ingestor.
fn seed(svc: &Service, packets: &[UpdatePacket]) {
    for p in packets {
        svc.ingestor().process_packet(p).unwrap();
    }
}

fn wait_until(mut f: impl FnMut() -> bool) {
    let end = Instant::now() + Duration::from_secs(5);
    while !f() {
        assert!(Instant::now() < end, "condition not reached in time");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn distractors(n: usize) -> Vec<UpdatePacket> {
    synth::catalog(n, 11)
}

#[test]
fn planted_product_ranks_first() {
    let svc = empty_service(cfg());
    seed(&svc, &distractors(300));
    seed(&svc, &[packet(9001, "relaxed navy wool overcoat", "overcoat", "men")]);
    let resp = svc
        .handle_search(&look("relaxed navy wool overcoat", None).into())
        .unwrap();
    assert_eq!(resp.layers.len(), 1);
    let layer = &resp.layers[0];
    assert_eq!(layer.layer_key, LayerKey::OutermostTopwear);
    assert_eq!(layer.method, RerankMethod::Judge);
    assert_eq!(layer.products[0].product_id, "prod9001");
    assert!((layer.products[0].retrieval_score - 1.0).abs() < 1e-5);
}

#[test]
fn response_invariants() {
    let svc = empty_service(cfg());
    seed(&svc, &distractors(400));
    for l in synth::looks(10, 5) {
        let resp = svc.handle_search(&l.clone().into()).unwrap();
        let t = resp.timings;
        let sum = t.querygen_ms + t.embed_ms + t.retrieve_ms + t.rerank_ms + t.join_ms;
        assert!(sum <= t.total_ms + 1e-9, "{t:?}");
        let caption = l.caption_sidecar.unwrap();
        assert_eq!(resp.layers.len(), caption.split(", ").count());
        for layer in &resp.layers {
            assert!(layer.products.len() <= 10);
            for p in &layer.products {
                assert!(svc.product(&p.product_id).is_some());
            }
        }
        assert!(!resp.pipeline_version.is_empty());
    }
}

#[test]
fn plan_cache_by_look_id() {
    let svc = empty_service(cfg());
    seed(&svc, &distractors(50));
    let req: SearchRequest = look("black leather boots", None).into();
    assert!(!svc.handle_search(&req).unwrap().plan_cached);
    assert!(svc.handle_search(&req).unwrap().plan_cached);
}

#[test]
fn errors_classified() {
    let svc = empty_service(cfg());
    seed(&svc, &distractors(20));
    let plan_fail = svc.handle_search(&look("a purple thing", None).into());
    assert!(matches!(plan_fail, Err(SearchError::PlanFailed(_))), "{plan_fail:?}");
    let mut req: SearchRequest = look("black boots", None).into();
    req.deadline_ms = Some(5000);
    assert!(matches!(svc.handle_search(&req), Err(SearchError::BadRequest(_))));
    req.deadline_ms = None;
    req.top_n = Some(0);
    assert!(matches!(svc.handle_search(&req), Err(SearchError::BadRequest(_))));
    let snap = svc.metrics_snapshot();
    assert_eq!(snap.requests, 3);
    assert_eq!(snap.search_errors, 3);
}

#[test]
fn top_n_override() {
    let svc = empty_service(cfg());
    seed(&svc, &distractors(300));
    let mut req: SearchRequest = look("slim black leather boots", None).into();
    req.top_n = Some(3);
    let resp = svc.handle_search(&req).unwrap();
    assert_eq!(resp.layers[0].products.len(), 3);
}

#[test]
fn judge_fault_degrades_within_deadline() {
    let mut c = cfg();
    c.clients.judge_fault = JudgeFault::Slow(Duration::from_millis(3000));
    c.budgets.deadline_ms = 400;
    let svc = empty_service(c);
    seed(&svc, &distractors(300));
    let t = Instant::now();
    let resp = svc
        .handle_search(&look("slim navy wool overcoat, white cotton shirt, black denim jeans", Some(Gender::Men)).into())
        .unwrap();
    let wall = t.elapsed();
    assert!(wall <= Duration::from_millis(450), "{wall:?}");
    assert!(resp.degraded);
    for l in &resp.layers {
        assert_eq!(l.method, RerankMethod::FallbackCosine, "{:?}", l.layer_key);
        assert!(l.degraded_flags.contains("fallback_cosine"));
    }
    let snap = svc.metrics_snapshot();
    assert_eq!(snap.degraded_responses, 1);
    assert_eq!(snap.fallback_invocations, 3);
}

#[test]
fn fresh_metrics_are_zero_and_index_gauge_tracks_ingest() {
    let svc = empty_service(cfg());
    let snap = svc.metrics_snapshot();
    assert_eq!(snap.requests + snap.degraded_responses + snap.fallback_invocations + snap.dead_letters, 0);
    assert_eq!(snap.index_size, 0);
    let packets = distractors(25);
    for p in &packets {
        svc.handle_ingest(p.clone()).unwrap();
    }
    wait_until(|| svc.metrics_snapshot().index_size == 25);
    assert!(svc.render_metrics().contains("looksync_index_size 25"));
}

#[test]
fn ingest_webhook_semantics() {
    let svc = empty_service(cfg());
    let p = packet(1, "white cotton shirt", "shirt", "men");
    let ack = svc.handle_ingest(p.clone()).unwrap();
    assert!(!ack.duplicate);
    wait_until(|| svc.product("prod1").is_some());
    let ack = svc.handle_ingest(p.clone()).unwrap();
    assert!(ack.duplicate);
    assert_eq!(svc.ingestor().applied_count(), 1);

    let mut bad = packet(2, "x", "shirt", "men");
    bad.image_ref = None;
    assert!(matches!(svc.handle_ingest(bad), Err(IngestRejected::MalformedPacket(_))));
    assert!(matches!(svc.handle_ingest_raw("{not json"), Err(IngestRejected::MalformedPacket(_))));
    assert_eq!(svc.metrics_snapshot().dead_letters, 1);
}

fn write_log(dir: &Path, packets: &[UpdatePacket], extra: &[(usize, &str)]) -> PathBuf {
    let mut lines: Vec<String> = packets.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
    for (at, l) in extra {
        lines.insert(*at, (*l).to_owned());
    }
    let path = dir.join("catalog.ndjson");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn bulk_build_empty_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let embedder = cfg().embedder.build().unwrap();
    let empty = dir.path().join("empty.ndjson");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty.idx");
    let r = bulk_build(&empty, &out, IndexParams::new(DIM), Arc::clone(&embedder), None, BuildOptions::default())
        .unwrap();
    assert_eq!((r.count, r.dead_letters), (0, 0));
    assert_eq!(VectorIndex::load(&out).unwrap().len(), 0);

    let packets = distractors(30);
    let log = write_log(dir.path(), &packets, &[(7, "{\"packet_id\": broken")]);
    let out = dir.path().join("cat.idx");
    let r = bulk_build(&log, &out, IndexParams::new(DIM), Arc::clone(&embedder), None, BuildOptions::default())
        .unwrap();
    assert_eq!(r.count, 30);
    assert_eq!(r.dead_letters, 1);
    assert_eq!(r.malformed_lines, vec![8]);
    assert!(r.dead_letter_path.unwrap().exists());

    let strict = bulk_build(&log, &out, IndexParams::new(DIM), embedder, None, BuildOptions { strict: true });
    assert!(matches!(strict, Err(BuildError::CorruptInput { line: 8, .. })), "{strict:?}");
}

#[test]
fn online_and_offline_ingestion_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut packets = distractors(200);
    // A metadata update and a redelivery in the log.
    let mut upd = packets[3].clone();
    upd.packet_id = "upd-3".into();
    upd.op = PacketOp::MetadataUpdate;
    upd.image_ref = None;
    upd.raw_metadata.insert("gender".into(), "unisex".into());
    packets.push(upd);
    packets.push(packets[10].clone());
    let log = write_log(dir.path(), &packets, &[]);
    let out = dir.path().join("bulk.idx");
    let embedder = cfg().embedder.build().unwrap();
    bulk_build(&log, &out, IndexParams::new(DIM), Arc::clone(&embedder), None, BuildOptions::default()).unwrap();
    let (offline, offline_store) = load_index(&out).unwrap();

    let svc = empty_service(cfg());
    for p in &packets {
        svc.handle_ingest(p.clone()).unwrap();
    }
    wait_until(|| svc.ingestor().applied_count() == 201);
    let online = svc.pipeline().index();
    assert_eq!(online.len(), offline.len());
    assert_eq!(offline_store.len(), svc.pipeline().store().len());
    let everything = AttributePredicate::default();
    for (i, l) in synth::looks(100, 2).iter().enumerate() {
        let q = embedder.embed_text(l.caption_sidecar.as_deref().unwrap()).unwrap();
        let a = online.search_exact(&q, 10, &everything).unwrap();
        let b = offline.search_exact(&q, 10, &everything).unwrap();
        assert_eq!(a, b, "query {i}");
    }
    assert_eq!(offline.get(&packets[3].product_id).unwrap().attrs.gender, Gender::Unisex);
}

#[test]
fn shutdown_persists_index_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg();
    c.server.index_path = Some(dir.path().join("live.idx"));
    let svc = empty_service(c.clone());
    for p in distractors(12) {
        svc.handle_ingest(p).unwrap();
    }
    svc.shutdown().unwrap();
    drop(svc);
    let again = empty_service(c);
    assert_eq!(again.health().index_size, 12);
    assert_eq!(again.health().products, 12);
    assert!(again.product("sku000004").unwrap().caption.is_some());
}

#[test]
fn mos_round_trip_through_service() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.json");
    let spec = |id: &str, model: &str| TaskSpec {
        task_id: id.into(),
        look_id: "l1".into(),
        look_image: "/l1.png".into(),
        gender: crate::eval::GenderSegment::Male,
        layer: "outfit".into(),
        model_id: model.into(),
        candidates: vec![],
    };
    std::fs::write(&tasks, serde_json::to_string(&vec![spec("a", "DINOv2"), spec("b", "CLIP ViT-H/14")]).unwrap())
        .unwrap();
    let mut c = cfg();
    c.server.annotation_tasks = Some(tasks);
    c.server.scores_path = Some(dir.path().join("scores.csv"));
    let svc = empty_service(c.clone());
    while let Some(task) = svc.next_task("ann1") {
        svc.record_mos(MosSubmission {
            annotator_id: "ann1".into(),
            gender: task.gender_segment,
            model_id: task.model_id,
            look_id: task.look.look_id,
            layer: task.layer,
            score: 4,
            rated_at: None,
        })
        .unwrap();
    }
    let recs = crate::eval::load_csv(&dir.path().join("scores.csv")).unwrap();
    let mut models: Vec<_> = recs.iter().map(|r| r.model_id.as_str()).collect();
    models.sort();
    assert_eq!(models, ["CLIP ViT-H/14", "DINOv2"]);
    drop(svc);
    // Scores survive a restart and the annotator stays done.
    let again = empty_service(c);
    assert!(again.next_task("ann1").is_none());
}
