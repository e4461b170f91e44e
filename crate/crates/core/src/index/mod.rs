//! Product vector index: exact and approximate top-k cosine search with
//! attribute prefiltering, persisted in a checksummed binary file.
//!
//! Readers take a shared lock for the whole search, so a concurrent upsert is
//! observed either entirely or not at all.

mod hnsw;
mod persist;

use std::collections::HashMap;
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttributePredicate, AttributeSet};
use crate::embedding::{dot, EmbeddingVector};
use hnsw::{Graph, Scored, Vectors};

pub use persist::{FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, vector has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("product {0:?} is not indexed")]
    NotFound(String),
    #[error("corrupt index file: {0}")]
    CorruptFile(String),
    #[error("unsupported index format version {0}")]
    VersionUnsupported(u32),
    #[error("index i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Indexes with at most this many entries are searched exhaustively.
    pub exact_threshold: usize,
    /// Seed for the level assignment hash.
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
            exact_threshold: 1000,
            seed: 0x4c4b_5359_4e43,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexParams {
    pub dim: usize,
    #[serde(default)]
    pub ann: AnnParams,
}

impl IndexParams {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ann: AnnParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dim == 0 {
            return Err(IndexError::InvalidParams("dim must be positive".into()));
        }
        if self.ann.m < 2 {
            return Err(IndexError::InvalidParams("M must be at least 2".into()));
        }
        if self.ann.ef_search == 0 || self.ann.ef_construction == 0 {
            return Err(IndexError::InvalidParams("ef values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub product_id: String,
    pub vector: EmbeddingVector,
    pub attrs: AttributeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub product_id: String,
    pub score: f32,
}

/// Score descending, then product id ascending.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.product_id.cmp(&b.product_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Replaced,
}

/// Compact per-slot filter key so selectivity scans avoid string compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FilterKey {
    category: u8,
    gender: u8,
    geography: u32,
}

struct CompiledFilter {
    categories: u16,
    genders: u16,
    geography: Option<u32>,
}

impl CompiledFilter {
    #[inline]
    fn accepts(&self, k: FilterKey) -> bool {
        self.categories & (1 << k.category) != 0
            && self.genders & (1 << k.gender) != 0
            && self.geography.map_or(true, |g| g == k.geography)
    }
}

#[derive(Debug)]
pub(crate) struct Store {
    dim: usize,
    ids: Vec<String>,
    slots: HashMap<String, u32>,
    vectors: Vec<f32>,
    attrs: Vec<AttributeSet>,
    keys: Vec<FilterKey>,
    geographies: HashMap<String, u32>,
    graph: Graph,
}

impl Store {
    fn new(params: &IndexParams) -> Self {
        Self {
            dim: params.dim,
            ids: Vec::new(),
            slots: HashMap::new(),
            vectors: Vec::new(),
            attrs: Vec::new(),
            keys: Vec::new(),
            geographies: HashMap::new(),
            graph: Graph::new(params.ann.m, params.ann.ef_construction, params.ann.seed),
        }
    }

    fn view(&self) -> Vectors<'_> {
        Vectors {
            data: &self.vectors,
            dim: self.dim,
        }
    }

    fn key_for(&mut self, attrs: &AttributeSet) -> FilterKey {
        let next = self.geographies.len() as u32;
        let geography = *self
            .geographies
            .entry(attrs.geography.to_lowercase())
            .or_insert(next);
        FilterKey {
            category: attrs.category.code(),
            gender: attrs.gender.code(),
            geography,
        }
    }

    fn compile(&self, p: &AttributePredicate) -> CompiledFilter {
        let categories = p
            .categories
            .as_ref()
            .map_or(u16::MAX, |s| s.iter().fold(0, |m, c| m | 1 << c.code()));
        let genders = p
            .genders
            .as_ref()
            .map_or(u16::MAX, |s| s.iter().fold(0, |m, g| m | 1 << g.code()));
        let geography = p.geography.as_ref().map(|g| {
            self.geographies
                .get(&g.to_lowercase())
                .copied()
                .unwrap_or(u32::MAX)
        });
        CompiledFilter {
            categories,
            genders,
            geography,
        }
    }

    fn hit(&self, s: Scored) -> SearchHit {
        SearchHit {
            product_id: self.ids[s.node as usize].clone(),
            score: s.score,
        }
    }

    fn exact(&self, query: &[f32], k: usize, filter: &CompiledFilter) -> Vec<SearchHit> {
        let view = self.view();
        let mut scored: Vec<Scored> = self
            .keys
            .iter()
            .enumerate()
            .filter(|(_, key)| filter.accepts(**key))
            .map(|(i, _)| Scored {
                score: dot(query, view.get(i as u32)),
                node: i as u32,
            })
            .collect();
        self.top_k(&mut scored, k)
    }

    fn top_k(&self, scored: &mut Vec<Scored>, k: usize) -> Vec<SearchHit> {
        let order = |a: &Scored, b: &Scored| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| self.ids[a.node as usize].cmp(&self.ids[b.node as usize]))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored.iter().map(|&s| self.hit(s)).collect()
    }
}

/// Fraction of matching entries below which a filtered ANN query scans the
/// matching subset exhaustively instead of walking the graph.
const SELECTIVE_FILTER_FRACTION: f64 = 0.05;

#[derive(Debug)]
pub struct VectorIndex {
    params: IndexParams,
    inner: RwLock<Store>,
}

impl VectorIndex {
    pub fn new(params: IndexParams) -> Result<Self, IndexError> {
        params.validate()?;
        Ok(Self {
            inner: RwLock::new(Store::new(&params)),
            params,
        })
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn len(&self) -> usize {
        self.inner.read().ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, product_id: &str) -> bool {
        self.inner.read().slots.contains_key(product_id)
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), IndexError> {
        if v.dim() != self.params.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.params.dim,
                got: v.dim(),
            });
        }
        Ok(())
    }

    pub fn upsert(&self, entry: IndexEntry) -> Result<UpsertOutcome, IndexError> {
        self.check_dim(&entry.vector)?;
        let mut store = self.inner.write();
        let key = store.key_for(&entry.attrs);
        if let Some(&slot) = store.slots.get(&entry.product_id) {
            let dim = store.dim;
            let range = slot as usize * dim..(slot as usize + 1) * dim;
            let changed = store.vectors[range.clone()] != *entry.vector.as_slice();
            store.vectors[range].copy_from_slice(entry.vector.as_slice());
            store.attrs[slot as usize] = entry.attrs;
            store.keys[slot as usize] = key;
            if changed {
                let Store { graph, vectors, .. } = &mut *store;
                graph.relink(slot, Vectors { data: vectors, dim });
            }
            return Ok(UpsertOutcome::Replaced);
        }
        let slot = u32::try_from(store.ids.len())
            .map_err(|_| IndexError::InvalidParams("index is full".into()))?;
        store.slots.insert(entry.product_id.clone(), slot);
        store.ids.push(entry.product_id);
        store.vectors.extend_from_slice(entry.vector.as_slice());
        store.attrs.push(entry.attrs);
        store.keys.push(key);
        let dim = store.dim;
        let Store { graph, vectors, .. } = &mut *store;
        graph.insert(slot, Vectors { data: vectors, dim });
        Ok(UpsertOutcome::Inserted)
    }

    /// Replaces the attributes of an indexed product without touching its vector.
    pub fn update_attrs(&self, product_id: &str, attrs: AttributeSet) -> Result<(), IndexError> {
        let mut store = self.inner.write();
        let slot = *store
            .slots
            .get(product_id)
            .ok_or_else(|| IndexError::NotFound(product_id.to_owned()))?;
        let key = store.key_for(&attrs);
        store.attrs[slot as usize] = attrs;
        store.keys[slot as usize] = key;
        Ok(())
    }

    pub fn get(&self, product_id: &str) -> Option<IndexEntry> {
        let store = self.inner.read();
        let slot = *store.slots.get(product_id)?;
        Some(IndexEntry {
            product_id: product_id.to_owned(),
            vector: EmbeddingVector::from_unit(store.view().get(slot).to_vec()).ok()?,
            attrs: store.attrs[slot as usize].clone(),
        })
    }

    /// Vector and attributes for each id, read under a single lock.
    pub fn lookup_many<'a, I>(&self, ids: I) -> HashMap<String, (EmbeddingVector, AttributeSet)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let store = self.inner.read();
        ids.into_iter()
            .filter_map(|id| {
                let slot = *store.slots.get(id)?;
                let v = EmbeddingVector::from_unit(store.view().get(slot).to_vec()).ok()?;
                Some((id.to_owned(), (v, store.attrs[slot as usize].clone())))
            })
            .collect()
    }

    /// Snapshot of every entry in insertion order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        let store = self.inner.read();
        (0..store.ids.len())
            .filter_map(|i| {
                Some(IndexEntry {
                    product_id: store.ids[i].clone(),
                    vector: EmbeddingVector::from_unit(store.view().get(i as u32).to_vec()).ok()?,
                    attrs: store.attrs[i].clone(),
                })
            })
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.inner.read().ids.clone()
    }

    /// Brute-force top-k among entries matching `filter`.
    pub fn search_exact(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &AttributePredicate,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_dim(query)?;
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let store = self.inner.read();
        let compiled = store.compile(filter);
        Ok(store.exact(query.as_slice(), k, &compiled))
    }

    /// Approximate top-k among entries matching `filter`.
    ///
    /// Small indexes and highly selective filters fall back to an exhaustive
    /// scan; otherwise the graph is walked with the filter applied during
    /// expansion, using a beam of `max(ef_search, k)`.
    pub fn search_ann(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: &AttributePredicate,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_dim(query)?;
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let store = self.inner.read();
        let n = store.ids.len();
        let compiled = store.compile(filter);
        if n <= self.params.ann.exact_threshold {
            return Ok(store.exact(query.as_slice(), k, &compiled));
        }
        let filtered = !filter.is_trivial();
        if filtered {
            let matching = store.keys.iter().filter(|key| compiled.accepts(**key)).count();
            if matching <= self.params.ann.exact_threshold.max(k)
                || (matching as f64) < SELECTIVE_FILTER_FRACTION * n as f64
            {
                return Ok(store.exact(query.as_slice(), k, &compiled));
            }
        }
        let ef = self.params.ann.ef_search.max(k);
        let keys = &store.keys;
        let accept = |node: u32| compiled.accepts(keys[node as usize]);
        let mut found = store.graph.search(
            query.as_slice(),
            ef,
            store.view(),
            if filtered { Some(&accept) } else { None },
        );
        Ok(store.top_k(&mut found, k))
    }

    pub fn save(&self, path: &Path) -> Result<u64, IndexError> {
        let store = self.inner.read();
        persist::save(&self.params, &store, path)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let (params, store) = persist::load(path)?;
        Ok(Self {
            params,
            inner: RwLock::new(store),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        persist::encode(&self.params, &self.inner.read())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let (params, store) = persist::decode(bytes)?;
        Ok(Self {
            params,
            inner: RwLock::new(store),
        })
    }
}

#[cfg(test)]
mod tests;
