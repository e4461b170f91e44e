//! HTTP transport. Handlers hand work to the blocking pool; the service
//! itself never runs on the async executor.

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::{IngestRejected, MosSubmission, SearchError, SearchRequest, Service};
use crate::eval::MosError;

fn error(status: StatusCode, kind: &str, message: impl ToString) -> Response {
    (status, Json(json!({ "error": message.to_string(), "kind": kind }))).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Response> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
}

async fn search(State(svc): State<Arc<Service>>, body: String) -> Response {
    let req: SearchRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e),
    };
    let out = match blocking(move || svc.handle_search(&req)).await {
        Ok(o) => o,
        Err(r) => return r,
    };
    match out {
        Ok(resp) => Json(resp).into_response(),
        Err(e @ SearchError::BadRequest(_)) => error(StatusCode::BAD_REQUEST, "bad_request", e),
        Err(e @ SearchError::PlanFailed(_)) => error(StatusCode::UNPROCESSABLE_ENTITY, "plan_failed", e),
        Err(e @ SearchError::IndexUnavailable(_)) => error(StatusCode::SERVICE_UNAVAILABLE, "index_unavailable", e),
    }
}

async fn ingest(State(svc): State<Arc<Service>>, body: String) -> Response {
    let out = match blocking(move || svc.handle_ingest_raw(&body)).await {
        Ok(o) => o,
        Err(r) => return r,
    };
    match out {
        Ok(ack) => (StatusCode::ACCEPTED, Json(ack)).into_response(),
        Err(e @ IngestRejected::MalformedPacket(_)) => error(StatusCode::BAD_REQUEST, "malformed_packet", e),
        Err(e) => error(StatusCode::SERVICE_UNAVAILABLE, "busy", e),
    }
}

async fn product(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match svc.product(&id) {
        Some(rec) => Json(rec).into_response(),
        None => error(StatusCode::NOT_FOUND, "not_found", format!("no product {id}")),
    }
}

async fn healthz(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.health()).into_response()
}

async fn metrics(State(svc): State<Arc<Service>>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        svc.render_metrics(),
    )
        .into_response()
}

async fn next_task(State(svc): State<Arc<Service>>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(annotator) = q.get("annotator").filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "bad_request", "missing annotator");
    };
    match svc.next_task(annotator) {
        Some(task) => Json(task).into_response(),
        None => Json(json!({ "done": true })).into_response(),
    }
}

async fn mos(State(svc): State<Arc<Service>>, body: String) -> Response {
    let sub: MosSubmission = match serde_json::from_str(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", e),
    };
    let out = match blocking(move || svc.record_mos(sub)).await {
        Ok(o) => o,
        Err(r) => return r,
    };
    match out {
        Ok(rec) => (StatusCode::CREATED, Json(rec)).into_response(),
        Err(e @ MosError::Io(_)) => error(StatusCode::INTERNAL_SERVER_ERROR, "io", e),
        Err(e) => error(StatusCode::BAD_REQUEST, "invalid_score", e),
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/search", post(search))
        .route("/v1/ingest", post(ingest))
        .route("/v1/product/{id}", get(product))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .route("/v1/annotation/next", get(next_task))
        .route("/v1/mos", post(mos))
        .with_state(svc)
}

pub async fn serve(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

/// Serves on `bind` until Ctrl-C, then drains ingestion and persists state.
pub fn run(svc: Arc<Service>, bind: &str) -> Result<(), super::ServiceError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| super::ServiceError::Io {
            path: bind.into(),
            source,
        })?;
    let io = |source| super::ServiceError::Io {
        path: bind.into(),
        source,
    };
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        serve(Arc::clone(&svc), listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(io)?;
    drop(rt);
    svc.shutdown()
}
