//! Per-layer candidate retrieval: embed the query, prefiltered ANN search,
//! near-duplicate collapse and hard preference filters.

use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttributePredicate, AttributeSet, Gender};
use crate::embedding::{dot, EmbedError, Embedder, EmbeddingVector};
use crate::index::{hit_order, IndexError, SearchHit, VectorIndex};
use crate::querygen::{LayerKey, UserPrefs};
use crate::tables::LayerTables;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_retrieve: usize,
    pub top_n: usize,
    pub dedup_tau: f32,
    pub enforce_gender: bool,
    pub enforce_category: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_retrieve: 50,
            top_n: 10,
            dedup_tau: 0.98,
            enforce_gender: true,
            enforce_category: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_n == 0 || self.top_n > self.k_retrieve {
            return Err(format!(
                "top_n must be in 1..={} (k_retrieve), got {}",
                self.k_retrieve, self.top_n
            ));
        }
        if !(self.dedup_tau > 0.0 && self.dedup_tau <= 1.0) {
            return Err(format!("dedup_tau must be in (0, 1], got {}", self.dedup_tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradedFlag {
    DedupSkipped,
    FilterRelaxed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RetrievalTimings {
    pub embed_ms: f64,
    pub search_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub layer_key: LayerKey,
    pub query_text: String,
    pub hits: Vec<SearchHit>,
    pub degraded_flags: BTreeSet<DegradedFlag>,
    #[serde(skip)]
    pub timings: RetrievalTimings,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query has no searchable text")]
    EmptyQuery,
    #[error("index unavailable: {0}")]
    IndexUnavailable(String),
    #[error("query embedding failed: {0}")]
    Embed(EmbedError),
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

impl From<EmbedError> for RetrievalError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyQuery => Self::EmptyQuery,
            other => Self::Embed(other),
        }
    }
}

impl From<IndexError> for RetrievalError {
    fn from(e: IndexError) -> Self {
        Self::IndexUnavailable(e.to_string())
    }
}

/// Request-scoped inputs shared by every layer of one look.
#[derive(Debug, Clone, Copy, Default)]
pub struct LookContext<'a> {
    pub declared_gender: Option<Gender>,
    pub geography: &'a str,
    pub prefs: Option<&'a UserPrefs>,
    /// Past this instant dedup is skipped and flagged.
    pub deadline: Option<Instant>,
}

/// The index prefilter for one layer. Gender admits the declared gender and
/// unisex; an unknown or missing gender and an empty geography do not filter.
pub fn prefilter(layer: LayerKey, ctx: &LookContext<'_>, cfg: &RetrievalConfig, layers: &LayerTables) -> AttributePredicate {
    let mut p = AttributePredicate::any();
    if cfg.enforce_category {
        let cats = layers.categories_for(layer);
        if !cats.is_empty() {
            p = p.with_categories(cats.iter().copied());
        }
    }
    if cfg.enforce_gender {
        if let Some(g) = ctx.declared_gender.filter(|g| *g != Gender::Unknown) {
            p = p.with_genders([g, Gender::Unisex]);
        }
    }
    if !ctx.geography.trim().is_empty() {
        p = p.with_geography(ctx.geography.trim());
    }
    p
}

pub fn retrieve_layer(
    layer: LayerKey,
    query_text: &str,
    ctx: &LookContext<'_>,
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
    index: &VectorIndex,
    layers: &LayerTables,
) -> Result<CandidateSet, RetrievalError> {
    cfg.validate().map_err(RetrievalError::Config)?;
    if query_text.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let t0 = Instant::now();
    let query = embedder.embed_text(query_text)?;
    let embed_ms = ms(t0.elapsed());

    let t1 = Instant::now();
    let filter = prefilter(layer, ctx, cfg, layers);
    let hits = index.search_ann(&query, cfg.k_retrieve, &filter)?;
    let stored = index.lookup_many(hits.iter().map(|h| h.product_id.as_str()));
    let mut flags = BTreeSet::new();

    let hits = if ctx.deadline.is_some_and(|d| Instant::now() >= d) || stored.len() < hits.len() {
        flags.insert(DegradedFlag::DedupSkipped);
        hits
    } else {
        let vectors: HashMap<&str, &EmbeddingVector> = stored.iter().map(|(k, (v, _))| (k.as_str(), v)).collect();
        dedup(&hits, &vectors, cfg.dedup_tau)
    };
    let attrs: HashMap<&str, &AttributeSet> = stored.iter().map(|(k, (_, a))| (k.as_str(), a)).collect();
    let (mut hits, relaxed) = apply_hard_filters(&hits, &attrs, ctx.prefs);
    if relaxed {
        flags.insert(DegradedFlag::FilterRelaxed);
    }
    hits.truncate(cfg.top_n);
    Ok(CandidateSet {
        layer_key: layer,
        query_text: query_text.to_owned(),
        hits,
        degraded_flags: flags,
        timings: RetrievalTimings {
            embed_ms,
            search_ms: ms(t1.elapsed()),
        },
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Greedy leader clustering in rank order: a hit survives if its cosine with
/// every survivor so far is below `tau`. Hits without a vector are kept.
pub fn dedup<V: Borrow<EmbeddingVector>>(hits: &[SearchHit], vectors: &HashMap<&str, V>, tau: f32) -> Vec<SearchHit> {
    let mut kept: Vec<SearchHit> = Vec::with_capacity(hits.len());
    let mut kept_vecs: Vec<&EmbeddingVector> = Vec::with_capacity(hits.len());
    for hit in hits {
        let Some(v) = vectors.get(hit.product_id.as_str()).map(Borrow::borrow) else {
            kept.push(hit.clone());
            continue;
        };
        if kept_vecs.iter().all(|k| dot(k.as_slice(), v.as_slice()) < tau) {
            kept.push(hit.clone());
            kept_vecs.push(v);
        }
    }
    kept
}

fn passes(attrs: &AttributeSet, prefs: &UserPrefs) -> bool {
    if !prefs.brands.is_empty() && !prefs.brands.iter().any(|b| b.trim().eq_ignore_ascii_case(attrs.brand.trim())) {
        return false;
    }
    if !prefs.sizes.is_empty()
        && !prefs
            .sizes
            .iter()
            .any(|s| attrs.sizes.iter().any(|have| have.eq_ignore_ascii_case(s.trim())))
    {
        return false;
    }
    if prefs.price_min.is_some() || prefs.price_max.is_some() {
        let Some(price) = &attrs.price else { return false };
        if prefs.price_min.is_some_and(|m| price.minor < m) || prefs.price_max.is_some_and(|m| price.minor > m) {
            return false;
        }
    }
    true
}

/// Conjunctive brand, size and price filtering, order preserved. When every
/// hit would be removed the input is returned unchanged with `true`.
pub fn apply_hard_filters<A: Borrow<AttributeSet>>(
    hits: &[SearchHit],
    attrs: &HashMap<&str, A>,
    prefs: Option<&UserPrefs>,
) -> (Vec<SearchHit>, bool) {
    let Some(prefs) = prefs else {
        return (hits.to_vec(), false);
    };
    let kept: Vec<SearchHit> = hits
        .iter()
        .filter(|h| attrs.get(h.product_id.as_str()).is_some_and(|a| passes(a.borrow(), prefs)))
        .cloned()
        .collect();
    if kept.is_empty() && !hits.is_empty() {
        (hits.to_vec(), true)
    } else {
        (kept, false)
    }
}

/// True when `hits` are in canonical result order.
pub fn is_ranked(hits: &[SearchHit]) -> bool {
    hits.windows(2).all(|w| hit_order(&w[0], &w[1]).is_le())
}
