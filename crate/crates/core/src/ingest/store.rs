use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;
use crate::index::VectorIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub raw_metadata: BTreeMap<String, String>,
    pub attrs: AttributeSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub embedding_present: bool,
    pub ingested_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Product metadata keyed by id. Persisted as one JSON record per line.
#[derive(Debug, Default)]
pub struct MetadataStore {
    records: RwLock<HashMap<String, ProductRecord>>,
}

impl MetadataStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, product_id: &str) -> Option<ProductRecord> {
        self.records.read().get(product_id).cloned()
    }

    pub fn put(&self, record: ProductRecord) {
        self.records.write().insert(record.product_id.clone(), record);
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records sorted by product id.
    pub fn records(&self) -> Vec<ProductRecord> {
        let mut out: Vec<_> = self.records.read().values().cloned().collect();
        out.sort_by(|a, b| a.product_id.cmp(&b.product_id));
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(fs::File::create(&tmp)?);
            for r in self.records() {
                serde_json::to_writer(&mut w, &r)?;
                w.write_all(b"\n")?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let store = Self::new();
        for (n, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProductRecord = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1))
            })?;
            store.put(rec);
        }
        Ok(store)
    }
}

/// Fast attribute lookup used by the online path.
pub trait AttributeCache: Send + Sync {
    fn get(&self, product_id: &str) -> Option<AttributeSet>;
    fn put(&self, product_id: &str, attrs: &AttributeSet);
    fn len(&self) -> usize;
}

#[derive(Debug, Default)]
pub struct InMemoryAttributeCache {
    map: RwLock<HashMap<String, AttributeSet>>,
}

impl InMemoryAttributeCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl AttributeCache for InMemoryAttributeCache {
    fn get(&self, product_id: &str) -> Option<AttributeSet> {
        self.map.read().get(product_id).cloned()
    }

    fn put(&self, product_id: &str, attrs: &AttributeSet) {
        self.map.write().insert(product_id.to_owned(), attrs.clone());
    }

    fn len(&self) -> usize {
        self.map.read().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoherenceIssue {
    MissingRecord(String),
    CacheMismatch(String),
    EmbeddingFlag(String),
    IndexAttrsMismatch(String),
}

/// Full scan over the index, store and cache. An empty result means coherent.
pub fn check_coherence(index: &VectorIndex, store: &MetadataStore, cache: &dyn AttributeCache) -> Vec<CoherenceIssue> {
    let mut issues = Vec::new();
    for entry in index.entries() {
        let id = entry.product_id;
        let Some(rec) = store.get(&id) else {
            issues.push(CoherenceIssue::MissingRecord(id));
            continue;
        };
        if cache.get(&id).as_ref() != Some(&rec.attrs) {
            issues.push(CoherenceIssue::CacheMismatch(id.clone()));
        }
        if entry.attrs != rec.attrs {
            issues.push(CoherenceIssue::IndexAttrsMismatch(id.clone()));
        }
        if !rec.embedding_present {
            issues.push(CoherenceIssue::EmbeddingFlag(id));
        }
    }
    for rec in store.records() {
        if rec.embedding_present && !index.contains(&rec.product_id) {
            issues.push(CoherenceIssue::EmbeddingFlag(rec.product_id));
        }
    }
    issues
}
