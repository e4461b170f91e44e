//! The search service: the online pipeline, the ingestion webhook, the
//! offline bulk build and the evaluation routes, independent of transport.

mod annotation;
pub mod bench;
mod config;
pub mod http;
mod metrics;
mod pipeline;
pub mod synth;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::Utc;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotation::{AnnotationQueue, AnnotationTask, CandidateCard, MosSubmission, TaskLook, TaskSpec};
pub use config::{BudgetConfig, ClientsConfig, ConfigError, ServerConfig, ServiceConfig, ENV_PREFIX};
pub use metrics::{Histogram, Metrics, MetricsSnapshot, BUCKETS_MS};
pub use pipeline::{
    Clients, LayerResponse, Pipeline, ProductView, SearchError, SearchRequest, SearchResponse, StageTimings,
};

use crate::embedding::Embedder;
use crate::eval::{write_csv, MosError, MosRecord, ScoreStore};
use crate::index::{IndexError, IndexParams, VectorIndex};
use crate::ingest::{
    write_dead_letters, AttributeCache, IngestWorkers, Ingestor, InMemoryAttributeCache, MetadataStore, ProductRecord,
    QueueError, UpdatePacket,
};

/// Path of the product metadata written next to an index file.
pub fn products_path(index_path: &Path) -> PathBuf {
    let mut s = index_path.as_os_str().to_owned();
    s.push(".products.ndjson");
    PathBuf::from(s)
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
}

/// Loads an index and its product sidecar. Without a sidecar, records are
/// rebuilt from the attributes stored in the index.
pub fn load_index(path: &Path) -> Result<(VectorIndex, MetadataStore), ServiceError> {
    let index = VectorIndex::load(path)?;
    let side = products_path(path);
    let store = if side.exists() {
        MetadataStore::load(&side).map_err(|source| ServiceError::Io { path: side, source })?
    } else {
        let store = MetadataStore::new();
        let now = Utc::now();
        for e in index.entries() {
            store.put(ProductRecord {
                product_id: e.product_id,
                raw_metadata: Default::default(),
                attrs: e.attrs,
                caption: None,
                embedding_present: true,
                ingested_at: now,
                updated_at: now,
            });
        }
        store
    };
    Ok((index, store))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildOptions {
    /// Fail on the first line that does not parse as a packet.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub count: usize,
    pub lines: usize,
    pub dead_letters: usize,
    /// 1-based line numbers that did not parse.
    pub malformed_lines: Vec<usize>,
    pub wall_ms: f64,
    pub index_path: PathBuf,
    pub products_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dead_letter_path: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt input at line {line}: {reason}")]
    CorruptInput { line: usize, reason: String },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Builds an index file from an ndjson packet log through the same
/// single-writer path online ingestion uses.
pub fn bulk_build(
    catalog: &Path,
    out: &Path,
    params: IndexParams,
    embedder: Arc<dyn Embedder>,
    image_base: Option<&Path>,
    opts: BuildOptions,
) -> Result<BuildReport, BuildError> {
    let start = Instant::now();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BuildError::Io { path, source }
    };
    let file = std::fs::File::open(catalog).map_err(io(catalog))?;
    let index = Arc::new(VectorIndex::new(params)?);
    let mut ingestor = Ingestor::new(Arc::clone(&index), embedder);
    let base = image_base
        .map(Path::to_path_buf)
        .or_else(|| catalog.parent().map(Path::to_path_buf));
    if let Some(b) = base {
        ingestor = ingestor.with_image_base(b);
    }
    let mut lines = 0;
    let mut malformed = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(catalog))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match UpdatePacket::parse(&line) {
            Ok(p) => {
                if let Err(e) = ingestor.process_packet(&p) {
                    tracing::debug!(line = i + 1, error = %e, "packet dead-lettered");
                }
            }
            Err(reason) if opts.strict => return Err(BuildError::CorruptInput { line: i + 1, reason }),
            Err(reason) => {
                ingestor.park_raw(&line, &format!("line {}: {reason}", i + 1));
                malformed.push(i + 1);
            }
        }
    }
    index.save(out)?;
    let side = products_path(out);
    ingestor.store().save(&side).map_err(io(&side))?;
    let letters = ingestor.take_dead_letters();
    let dead_letter_path = if letters.is_empty() {
        None
    } else {
        let mut p = out.as_os_str().to_owned();
        p.push(".dead_letters.ndjson");
        let p = PathBuf::from(p);
        let _ = std::fs::remove_file(&p);
        write_dead_letters(&p, &letters).map_err(io(&p))?;
        Some(p)
    };
    Ok(BuildReport {
        count: index.len(),
        lines,
        dead_letters: letters.len(),
        malformed_lines: malformed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        index_path: out.to_path_buf(),
        products_path: side,
        dead_letter_path,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub packet_id: String,
    pub status: String,
    pub duplicate: bool,
}

#[derive(Debug, Error)]
pub enum IngestRejected {
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("ingestion queue is full")]
    Busy,
    #[error("ingestion is shut down")]
    Closed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Health {
    pub ok: bool,
    pub index_size: usize,
    pub products: usize,
}

/// One running service instance. All methods are blocking.
pub struct Service {
    cfg: ServiceConfig,
    pipeline: Pipeline,
    ingestor: Arc<Ingestor>,
    workers: Mutex<Option<IngestWorkers>>,
    scores: ScoreStore,
    annotations: AnnotationQueue,
    metrics: Arc<Metrics>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("pipeline", &self.pipeline).finish_non_exhaustive()
    }
}

impl Service {
    pub fn new(
        cfg: ServiceConfig,
        index: Arc<VectorIndex>,
        store: Arc<MetadataStore>,
        clients: Clients,
    ) -> Result<Self, ServiceError> {
        cfg.validate()?;
        if index.dim() != clients.embedder.dim() {
            return Err(ServiceError::Data(format!(
                "index dim {} does not match embedder dim {}",
                index.dim(),
                clients.embedder.dim()
            )));
        }
        let cache = InMemoryAttributeCache::new();
        for r in store.records() {
            cache.put(&r.product_id, &r.attrs);
        }
        let mut ingestor = Ingestor::new(Arc::clone(&index), Arc::clone(&clients.embedder))
            .with_store(Arc::clone(&store))
            .with_cache(Arc::new(cache));
        if let Some(base) = &cfg.server.image_base {
            ingestor = ingestor.with_image_base(base);
        }
        let ingestor = Arc::new(ingestor);
        let workers = IngestWorkers::spawn(
            Arc::clone(&ingestor),
            cfg.server.ingest_workers,
            cfg.server.queue_capacity,
        );
        let scores = match &cfg.server.scores_path {
            Some(p) if p.exists() => {
                let recs = crate::eval::load_csv(p).map_err(|e| ServiceError::Data(format!("{}: {e}", p.display())))?;
                ScoreStore::from_records(recs).map_err(|e| ServiceError::Data(e.to_string()))?
            }
            _ => ScoreStore::new(),
        };
        let annotations = match &cfg.server.annotation_tasks {
            Some(p) => AnnotationQueue::load(p).map_err(ServiceError::Data)?,
            None => AnnotationQueue::default(),
        };
        let metrics = Arc::new(Metrics::default());
        let pipeline = Pipeline::new(cfg.clone(), index, store, clients, Arc::clone(&metrics));
        Ok(Self {
            cfg,
            pipeline,
            ingestor,
            workers: Mutex::new(Some(workers)),
            scores,
            annotations,
            metrics,
        })
    }

    /// Builds clients from the config and loads `server.index_path` if it
    /// exists; otherwise starts with an empty index.
    pub fn from_config(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let (index, store) = match &cfg.server.index_path {
            Some(p) if p.exists() => load_index(p)?,
            _ => {
                let mut params = IndexParams::new(cfg.embedder.dim);
                params.ann = cfg.index;
                (VectorIndex::new(params)?, MetadataStore::new())
            }
        };
        let index = Arc::new(index);
        let clients = Clients::from_config(&cfg, &index)?;
        Self::new(cfg, index, Arc::new(store), clients)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn ingestor(&self) -> &Arc<Ingestor> {
        &self.ingestor
    }

    pub fn scores(&self) -> &ScoreStore {
        &self.scores
    }

    pub fn annotations(&self) -> &AnnotationQueue {
        &self.annotations
    }

    pub fn handle_search(&self, req: &SearchRequest) -> Result<SearchResponse, SearchError> {
        self.pipeline.handle_search(req)
    }

    /// Queues a packet for the ingestion workers. Redelivered packet ids are
    /// acknowledged without being queued again.
    pub fn handle_ingest(&self, packet: UpdatePacket) -> Result<IngestAck, IngestRejected> {
        if let Err(e) = packet.validate() {
            metrics::inc(&self.metrics.ingest_rejected);
            return Err(IngestRejected::MalformedPacket(e));
        }
        let packet_id = packet.packet_id.clone();
        let duplicate = self.ingestor.is_applied(&packet_id);
        if !duplicate {
            let workers = self.workers.lock();
            let w = workers.as_ref().ok_or(IngestRejected::Closed)?;
            w.try_submit(packet).map_err(|e| match e {
                QueueError::Full => IngestRejected::Busy,
                _ => IngestRejected::Closed,
            })?;
        }
        metrics::inc(&self.metrics.ingest_accepted);
        Ok(IngestAck {
            packet_id,
            status: "accepted".into(),
            duplicate,
        })
    }

    /// Parses a raw webhook body, parking it as a dead letter if it is not a packet.
    pub fn handle_ingest_raw(&self, body: &str) -> Result<IngestAck, IngestRejected> {
        match serde_json::from_str::<UpdatePacket>(body) {
            Ok(p) => self.handle_ingest(p),
            Err(e) => {
                metrics::inc(&self.metrics.ingest_rejected);
                self.ingestor.park_raw(body, &e.to_string());
                Err(IngestRejected::MalformedPacket(e.to_string()))
            }
        }
    }

    pub fn product(&self, id: &str) -> Option<ProductRecord> {
        self.pipeline.store().get(id)
    }

    pub fn health(&self) -> Health {
        Health {
            ok: true,
            index_size: self.pipeline.index().len(),
            products: self.pipeline.store().len(),
        }
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        self.metrics
            .snapshot(self.pipeline.index().len() as u64, self.ingestor.dead_letters().len() as u64)
    }

    pub fn render_metrics(&self) -> String {
        self.metrics
            .render(self.pipeline.index().len() as u64, self.ingestor.dead_letters().len() as u64)
    }

    pub fn next_task(&self, annotator: &str) -> Option<AnnotationTask> {
        self.annotations.next_for(annotator, &self.scores)
    }

    /// Stores one score, rewriting the score file when one is configured.
    pub fn record_mos(&self, sub: MosSubmission) -> Result<MosRecord, MosError> {
        let rec = self.annotations.resolve(sub, Utc::now())?;
        self.scores.record(rec.clone())?;
        if let Some(path) = &self.cfg.server.scores_path {
            let tmp = path.with_extension("csv.tmp");
            let f = std::fs::File::create(&tmp)?;
            write_csv(f, &self.scores.snapshot())?;
            std::fs::rename(&tmp, path)?;
        }
        Ok(rec)
    }

    /// Drains queued ingestion, writes dead letters and persists the index.
    pub fn shutdown(&self) -> Result<(), ServiceError> {
        if let Some(w) = self.workers.lock().take() {
            if let Err(f) = w.finish() {
                tracing::error!(error = %f.error, "ingest worker failed");
            }
        }
        let letters = self.ingestor.take_dead_letters();
        if let (Some(p), false) = (&self.cfg.server.dead_letter_path, letters.is_empty()) {
            write_dead_letters(p, &letters).map_err(|source| ServiceError::Io {
                path: p.clone(),
                source,
            })?;
        }
        if let Some(p) = &self.cfg.server.index_path {
            self.pipeline.index().save(p)?;
            let side = products_path(p);
            self.pipeline
                .store()
                .save(&side)
                .map_err(|source| ServiceError::Io { path: side, source })?;
        }
        Ok(())
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        if let Some(w) = self.workers.lock().take() {
            let _ = w.abort();
        }
    }
}

#[cfg(test)]
mod tests;
