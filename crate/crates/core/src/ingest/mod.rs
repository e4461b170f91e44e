//! Catalog ingestion: update packets in, enriched records and embeddings out.
//!
//! Metadata-only updates refresh the store, cache and index attributes without
//! touching the embedder. New products are embedded from their image and
//! upserted. Every applied `packet_id` is recorded so redelivery is a no-op.

mod enrich;
mod packet;
mod queue;
mod store;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use enrich::{enrich, parse_minor_units};
pub use packet::{PacketOp, UpdatePacket};
pub use queue::{
    run_consumer, ChannelQueue, ChannelSender, ConsumerFailure, ConsumerOptions, ConsumerStats, Delivery, FileQueue,
    IngestWorkers,
    PacketQueue, Polled, QueueError,
};
pub use store::{check_coherence, AttributeCache, CoherenceIssue, InMemoryAttributeCache, MetadataStore, ProductRecord};

use crate::embedding::{EmbedError, Embedder};
use crate::index::{IndexEntry, IndexError, VectorIndex};
use crate::tables::NormalizationTables;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    MetadataOnly,
    NewProduct,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("metadata update for unknown product {0} without an image")]
    UnknownProductNoImage(String),
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("embedding failed for {product_id}: {reason}")]
    EmbedFailed { product_id: String, reason: String },
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Decides which ingestion path a packet takes.
pub fn classify(packet: &UpdatePacket, indexed: bool) -> Result<Classification, IngestError> {
    match packet.op {
        PacketOp::NewProduct => Ok(Classification::NewProduct),
        PacketOp::MetadataUpdate if indexed => Ok(Classification::MetadataOnly),
        PacketOp::MetadataUpdate if packet.has_image() => Ok(Classification::NewProduct),
        PacketOp::MetadataUpdate => Err(IngestError::UnknownProductNoImage(packet.product_id.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub packet_id: String,
    pub product_id: String,
    pub classification: Option<Classification>,
    pub embedded: bool,
    pub cache_updated: bool,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_id: Option<String>,
    pub reason: String,
    pub payload: String,
    pub parked_at: DateTime<Utc>,
}

/// Appends dead letters to an ndjson file.
pub fn write_dead_letters(path: &Path, letters: &[DeadLetter]) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for l in letters {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)
}

pub struct Ingestor {
    index: Arc<VectorIndex>,
    embedder: Arc<dyn Embedder>,
    tables: Arc<NormalizationTables>,
    store: Arc<MetadataStore>,
    cache: Arc<dyn AttributeCache>,
    image_base: Option<PathBuf>,
    ledger: Mutex<HashSet<String>>,
    dead: Mutex<Vec<DeadLetter>>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for Ingestor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ingestor")
            .field("indexed", &self.index.len())
            .field("records", &self.store.len())
            .finish_non_exhaustive()
    }
}

impl Ingestor {
    pub fn new(index: Arc<VectorIndex>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            index,
            embedder,
            tables: Arc::new(NormalizationTables::default()),
            store: Arc::new(MetadataStore::new()),
            cache: Arc::new(InMemoryAttributeCache::new()),
            image_base: None,
            ledger: Mutex::new(HashSet::new()),
            dead: Mutex::new(Vec::new()),
            writer: Mutex::new(()),
        }
    }

    pub fn with_tables(mut self, tables: Arc<NormalizationTables>) -> Self {
        self.tables = tables;
        self
    }

    pub fn with_store(mut self, store: Arc<MetadataStore>) -> Self {
        self.store = store;
        self
    }

    pub fn with_cache(mut self, cache: Arc<dyn AttributeCache>) -> Self {
        self.cache = cache;
        self
    }

    /// Directory that relative image paths are resolved against.
    pub fn with_image_base(mut self, base: impl Into<PathBuf>) -> Self {
        self.image_base = Some(base.into());
        self
    }

    pub fn index(&self) -> &Arc<VectorIndex> {
        &self.index
    }

    pub fn store(&self) -> &Arc<MetadataStore> {
        &self.store
    }

    pub fn cache(&self) -> &Arc<dyn AttributeCache> {
        &self.cache
    }

    pub fn tables(&self) -> &NormalizationTables {
        &self.tables
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.dead.lock().clone()
    }

    pub fn take_dead_letters(&self) -> Vec<DeadLetter> {
        std::mem::take(&mut *self.dead.lock())
    }

    pub fn is_applied(&self, packet_id: &str) -> bool {
        self.ledger.lock().contains(packet_id)
    }

    pub fn applied_count(&self) -> usize {
        self.ledger.lock().len()
    }

    /// Parks a payload that could not be parsed into a packet.
    pub fn park_raw(&self, payload: &str, reason: &str) {
        self.dead.lock().push(DeadLetter {
            packet_id: None,
            product_id: None,
            reason: reason.to_owned(),
            payload: payload.to_owned(),
            parked_at: Utc::now(),
        });
    }

    fn park(&self, packet: &UpdatePacket, err: &IngestError) {
        self.dead.lock().push(DeadLetter {
            packet_id: Some(packet.packet_id.clone()),
            product_id: Some(packet.product_id.clone()),
            reason: err.to_string(),
            payload: serde_json::to_string(packet).unwrap_or_default(),
            parked_at: Utc::now(),
        });
    }

    fn duplicate(packet: &UpdatePacket) -> IngestReport {
        IngestReport {
            packet_id: packet.packet_id.clone(),
            product_id: packet.product_id.clone(),
            classification: None,
            embedded: false,
            cache_updated: false,
            duplicate: true,
        }
    }

    /// Applies one packet. Failures are parked in the dead-letter list and
    /// leave the store, cache and index untouched.
    pub fn process_packet(&self, packet: &UpdatePacket) -> Result<IngestReport, IngestError> {
        let result = self.apply(packet);
        if let Err(e) = &result {
            self.park(packet, e);
        }
        result
    }

    fn apply(&self, packet: &UpdatePacket) -> Result<IngestReport, IngestError> {
        if self.is_applied(&packet.packet_id) {
            return Ok(Self::duplicate(packet));
        }
        packet.validate().map_err(IngestError::MalformedPacket)?;
        let class = classify(packet, self.index.contains(&packet.product_id))?;

        // Embedding happens outside the writer section; it may be a slow remote call.
        let vector = match class {
            Classification::MetadataOnly => None,
            Classification::NewProduct => {
                let embed_failed = |reason: String| IngestError::EmbedFailed {
                    product_id: packet.product_id.clone(),
                    reason,
                };
                let image_ref = packet.image_ref.as_ref().expect("validated: new product has an image");
                let bytes = image_ref
                    .resolve_from(self.image_base.as_deref())
                    .map_err(|e| embed_failed(e.to_string()))?;
                let v = self
                    .embedder
                    .embed_image(&bytes, packet.caption.as_deref())
                    .map_err(|e: EmbedError| embed_failed(e.to_string()))?;
                Some(v)
            }
        };

        let _w = self.writer.lock();
        if self.is_applied(&packet.packet_id) {
            return Ok(Self::duplicate(packet));
        }
        let now = Utc::now();
        let previous = self.store.get(&packet.product_id);
        let mut raw: BTreeMap<String, String> = match (&previous, class) {
            (Some(p), Classification::MetadataOnly) => p.raw_metadata.clone(),
            _ => BTreeMap::new(),
        };
        raw.extend(packet.raw_metadata.iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut attrs = enrich(&raw, &self.tables);
        attrs.geography = if packet.geography.trim().is_empty() {
            previous.as_ref().map(|p| p.attrs.geography.clone()).unwrap_or_default()
        } else {
            packet.geography.trim().to_owned()
        };
        let caption = packet
            .caption
            .clone()
            .or_else(|| previous.as_ref().and_then(|p| p.caption.clone()));

        let embedded = match vector {
            None => {
                self.index.update_attrs(&packet.product_id, attrs.clone())?;
                false
            }
            Some(vector) => {
                self.index.upsert(IndexEntry {
                    product_id: packet.product_id.clone(),
                    vector,
                    attrs: attrs.clone(),
                })?;
                true
            }
        };
        self.store.put(ProductRecord {
            product_id: packet.product_id.clone(),
            raw_metadata: raw,
            attrs: attrs.clone(),
            caption,
            embedding_present: true,
            ingested_at: previous.map_or(now, |p| p.ingested_at),
            updated_at: now,
        });
        self.cache.put(&packet.product_id, &attrs);
        self.ledger.lock().insert(packet.packet_id.clone());
        tracing::debug!(packet = %packet.packet_id, product = %packet.product_id, ?class, "packet applied");
        Ok(IngestReport {
            packet_id: packet.packet_id.clone(),
            product_id: packet.product_id.clone(),
            classification: Some(class),
            embedded,
            cache_updated: true,
            duplicate: false,
        })
    }
}
