use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ServiceConfig};
use super::metrics::{inc, Metrics};
use crate::attributes::AttributeSet;
use crate::embedding::Embedder;
use crate::index::VectorIndex;
use crate::ingest::MetadataStore;
use crate::querygen::{
    generate_queries, GeneratorClient, LayerKey, LookDescriptor, PromptTemplate, QueryGenError, QueryPlan,
    RemoteGenerator, StubGenerator,
};
use crate::rerank::fault::{FaultyJudge, FaultySegmenter};
use crate::rerank::{
    retrieval_order, FixtureSegmenter, JudgeClient, LookImage, RankedResult, RemoteJudge, RemoteSegmenter,
    RerankMethod, Reranker, SegmenterClient, StubJudge,
};
use crate::retrieval::{retrieve_layer, CandidateSet, LookContext, RetrievalConfig, RetrievalError};
use crate::tables::LayerTables;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    #[serde(flatten)]
    pub look: LookDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,
}

impl From<LookDescriptor> for SearchRequest {
    fn from(look: LookDescriptor) -> Self {
        Self {
            look,
            top_n: None,
            deadline_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductView {
    pub product_id: String,
    pub rerank_score: f32,
    pub retrieval_score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub attributes: AttributeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResponse {
    pub layer_key: LayerKey,
    pub query: String,
    pub method: RerankMethod,
    pub degraded: bool,
    pub degraded_flags: BTreeSet<String>,
    pub products: Vec<ProductView>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub querygen_ms: f64,
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub rerank_ms: f64,
    pub join_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub look_id: String,
    pub layers: Vec<LayerResponse>,
    pub timings: StageTimings,
    pub degraded: bool,
    pub degraded_flags: BTreeSet<String>,
    pub plan_cached: bool,
    pub pipeline_version: String,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("query generation failed: {0}")]
    PlanFailed(String),
    #[error("index unavailable: {0}")]
    IndexUnavailable(String),
}

/// The online path: plan, retrieve, rerank and join under one deadline.
pub struct Pipeline {
    cfg: ServiceConfig,
    index: Arc<VectorIndex>,
    store: Arc<MetadataStore>,
    embedder: Arc<dyn Embedder>,
    generator: Arc<dyn GeneratorClient>,
    prompt: Arc<PromptTemplate>,
    layers: Arc<LayerTables>,
    reranker: Reranker,
    plan_cache: Mutex<HashMap<String, QueryPlan>>,
    metrics: Arc<Metrics>,
    version: String,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("version", &self.version)
            .field("index", &self.index.len())
            .finish_non_exhaustive()
    }
}

/// Clients the pipeline talks to. [`Clients::from_config`] picks stubs or
/// remote implementations and wraps them with configured fault injection.
pub struct Clients {
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn GeneratorClient>,
    pub judge: Arc<dyn JudgeClient>,
    pub segmenter: Arc<dyn SegmenterClient>,
    pub prompt: Arc<PromptTemplate>,
    pub layers: Arc<LayerTables>,
}

impl Clients {
    pub fn from_config(cfg: &ServiceConfig, index: &Arc<VectorIndex>) -> Result<Self, ConfigError> {
        let c = &cfg.clients;
        let embedder = cfg.embedder.build().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let layers = Arc::new(LayerTables::default());
        let generator: Arc<dyn GeneratorClient> = match &c.generator_endpoint {
            Some(url) => Arc::new(RemoteGenerator::new(url.clone(), c.timeout(), c.max_in_flight())),
            None => Arc::new(StubGenerator::new(Arc::clone(&layers))),
        };
        let judge: Arc<dyn JudgeClient> = match &c.judge_endpoint {
            Some(url) => Arc::new(RemoteJudge::new(url.clone(), c.timeout(), c.max_in_flight())),
            None => Arc::new(StubJudge::new(Arc::clone(&embedder), Arc::clone(index))),
        };
        let segmenter: Arc<dyn SegmenterClient> = match (&c.segmenter_endpoint, &c.crops_fixture) {
            (Some(url), _) => Arc::new(RemoteSegmenter::new(url.clone(), c.timeout(), c.max_in_flight())),
            (None, Some(path)) => Arc::new(FixtureSegmenter::load(path).map_err(ConfigError::Invalid)?),
            (None, None) => Arc::new(FixtureSegmenter::new()),
        };
        let prompt = match &c.prompt_file {
            Some(p) => PromptTemplate::load(p).map_err(|source| ConfigError::Io {
                path: p.clone(),
                source,
            })?,
            None => PromptTemplate::default(),
        };
        Ok(Self {
            embedder,
            generator,
            judge: Arc::new(FaultyJudge::new(judge, c.judge_fault)),
            segmenter: Arc::new(FaultySegmenter::new(segmenter, c.segmenter_fault)),
            prompt: Arc::new(prompt),
            layers,
        })
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(
        cfg: ServiceConfig,
        index: Arc<VectorIndex>,
        store: Arc<MetadataStore>,
        clients: Clients,
        metrics: Arc<Metrics>,
    ) -> Self {
        let reranker = Reranker::new(
            clients.judge,
            clients.segmenter,
            Arc::clone(&clients.embedder),
            Arc::clone(&index),
        )
        .with_store(Arc::clone(&store))
        .with_granularity(cfg.budgets.granularity());
        let version = format!("looksync-{}+{}", env!("CARGO_PKG_VERSION"), clients.prompt.version);
        Self {
            cfg,
            index,
            store,
            embedder: clients.embedder,
            generator: clients.generator,
            prompt: clients.prompt,
            layers: clients.layers,
            reranker,
            plan_cache: Mutex::new(HashMap::new()),
            metrics,
            version,
        }
    }

    pub fn from_config(
        cfg: ServiceConfig,
        index: Arc<VectorIndex>,
        store: Arc<MetadataStore>,
        metrics: Arc<Metrics>,
    ) -> Result<Self, ConfigError> {
        let clients = Clients::from_config(&cfg, &index)?;
        Ok(Self::new(cfg, index, store, clients, metrics))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn index(&self) -> &Arc<VectorIndex> {
        &self.index
    }

    pub fn store(&self) -> &Arc<MetadataStore> {
        &self.store
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn clear_plan_cache(&self) {
        self.plan_cache.lock().clear();
    }

    pub fn handle_search(&self, req: &SearchRequest) -> Result<SearchResponse, SearchError> {
        let start = Instant::now();
        inc(&self.metrics.requests);
        let out = self.search(req, start);
        match &out {
            Ok(resp) => {
                let t = &resp.timings;
                self.metrics.querygen_ms.observe(t.querygen_ms);
                self.metrics.embed_ms.observe(t.embed_ms);
                self.metrics.retrieve_ms.observe(t.retrieve_ms);
                self.metrics.rerank_ms.observe(t.rerank_ms);
                self.metrics.total_ms.observe(t.total_ms);
                if resp.degraded {
                    inc(&self.metrics.degraded_responses);
                }
                for l in &resp.layers {
                    if l.method != RerankMethod::Judge && !l.products.is_empty() {
                        inc(&self.metrics.fallback_invocations);
                    }
                }
            }
            Err(e) => {
                tracing::info!(look = %req.look.look_id, error = %e, "search failed");
                inc(&self.metrics.search_errors);
            }
        }
        out
    }

    fn image_base(&self) -> Option<PathBuf> {
        self.cfg.server.image_base.clone()
    }

    fn search(&self, req: &SearchRequest, start: Instant) -> Result<SearchResponse, SearchError> {
        let budgets = &self.cfg.budgets;
        let deadline_ms = req.deadline_ms.unwrap_or(budgets.deadline_ms);
        if deadline_ms > budgets.max_deadline_ms {
            return Err(SearchError::BadRequest(format!(
                "deadline_ms {deadline_ms} exceeds the maximum {}",
                budgets.max_deadline_ms
            )));
        }
        let mut rcfg: RetrievalConfig = self.cfg.retrieval.clone();
        if let Some(n) = req.top_n {
            rcfg.top_n = n;
        }
        rcfg.validate().map_err(SearchError::BadRequest)?;
        let look = &req.look;
        look.validate().map_err(SearchError::BadRequest)?;
        let image: Arc<[u8]> = look
            .image
            .resolve_from(self.image_base().as_deref())
            .map_err(|e| SearchError::BadRequest(e.to_string()))?
            .into();

        let budget = Duration::from_millis(deadline_ms);
        let at = |pct: u32| start + budget * pct / 100;
        let querygen_end = at(budgets.querygen_pct);
        let retrieval_end = at(budgets.querygen_pct + budgets.retrieval_pct);
        let rerank_end = at(budgets.querygen_pct + budgets.retrieval_pct + budgets.rerank_pct);

        // Query generation is the one stage that cannot degrade.
        let cached = self.plan_cache.lock().get(&look.look_id).cloned();
        let plan_cached = cached.is_some();
        let plan = match cached {
            Some(p) => p,
            None => {
                let plan = generate_queries(
                    look,
                    Arc::clone(&image),
                    Arc::clone(&self.generator),
                    Arc::clone(&self.prompt),
                    Some(querygen_end),
                )
                .map_err(|e: QueryGenError| SearchError::PlanFailed(e.to_string()))?;
                let mut cache = self.plan_cache.lock();
                if cache.len() >= self.cfg.server.plan_cache_entries {
                    cache.clear();
                }
                cache.insert(look.look_id.clone(), plan.clone());
                plan
            }
        };
        let querygen_ms = ms(start.elapsed());

        let t_retrieve = Instant::now();
        let ctx = LookContext {
            declared_gender: look.declared_gender,
            geography: &look.geography,
            prefs: look.user_prefs.as_ref(),
            deadline: Some(retrieval_end),
        };
        let layer_queries: Vec<(LayerKey, &str)> = plan.layers().collect();
        let retrieved = self.fan_out(&layer_queries, |(key, text)| {
            retrieve_layer(*key, text, &ctx, &rcfg, &*self.embedder, &self.index, &self.layers)
        });
        let mut sets = Vec::with_capacity(retrieved.len());
        let mut layer_flags: Vec<BTreeSet<String>> = Vec::with_capacity(retrieved.len());
        let mut embed_ms: f64 = 0.0;
        for ((key, text), r) in layer_queries.iter().zip(retrieved) {
            match r {
                Ok(set) => {
                    embed_ms = embed_ms.max(set.timings.embed_ms);
                    layer_flags.push(
                        set.degraded_flags
                            .iter()
                            .map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default())
                            .collect(),
                    );
                    sets.push(set);
                }
                Err(RetrievalError::IndexUnavailable(m)) => return Err(SearchError::IndexUnavailable(m)),
                Err(e) => {
                    tracing::warn!(layer = %key, error = %e, "layer retrieval failed");
                    layer_flags.push(BTreeSet::from(["retrieval_failed".to_owned()]));
                    sets.push(CandidateSet {
                        layer_key: *key,
                        query_text: (*text).to_owned(),
                        hits: Vec::new(),
                        degraded_flags: BTreeSet::new(),
                        timings: Default::default(),
                    });
                }
            }
        }
        let retrieval_wall = ms(t_retrieve.elapsed());

        let t_rerank = Instant::now();
        let look_image = LookImage {
            look_id: look.look_id.clone(),
            image,
            caption: look.caption_sidecar.clone(),
        };
        let ranked: Vec<RankedResult> = if Instant::now() >= rerank_end {
            sets.iter()
                .map(|s| {
                    let skipped = !s.hits.is_empty();
                    retrieval_order(s, skipped, vec!["rerank budget exhausted".into()])
                })
                .collect()
        } else {
            self.fan_out(&sets, |set| self.reranker.rerank(&look_image, set, rerank_end))
        };
        let rerank_ms = ms(t_rerank.elapsed());

        let t_join = Instant::now();
        let mut layers = Vec::with_capacity(ranked.len());
        let mut all_flags = BTreeSet::new();
        for ((r, set), mut flags) in ranked.into_iter().zip(&sets).zip(layer_flags) {
            match r.method {
                RerankMethod::Judge => {}
                RerankMethod::FallbackCosine => {
                    flags.insert("fallback_cosine".into());
                }
                RerankMethod::RetrievalOrder if r.degraded => {
                    flags.insert("retrieval_order".into());
                }
                RerankMethod::RetrievalOrder => {}
            }
            let products = r
                .ranked
                .iter()
                .filter_map(|item| {
                    let rec = self.store.get(&item.product_id)?;
                    Some(ProductView {
                        product_id: item.product_id.clone(),
                        rerank_score: item.rerank_score,
                        retrieval_score: item.retrieval_score,
                        caption: rec.caption,
                        attributes: rec.attrs,
                    })
                })
                .collect();
            all_flags.extend(flags.iter().cloned());
            layers.push(LayerResponse {
                layer_key: r.layer_key,
                query: set.query_text.clone(),
                method: r.method,
                degraded: r.degraded || !flags.is_empty(),
                degraded_flags: flags,
                products,
            });
        }
        let join_ms = ms(t_join.elapsed());
        let total_ms = ms(start.elapsed());
        Ok(SearchResponse {
            look_id: look.look_id.clone(),
            degraded: layers.iter().any(|l| l.degraded),
            layers,
            timings: StageTimings {
                querygen_ms,
                embed_ms,
                retrieve_ms: (retrieval_wall - embed_ms).max(0.0),
                rerank_ms,
                join_ms,
                total_ms,
            },
            degraded_flags: all_flags,
            plan_cached,
            pipeline_version: self.version.clone(),
        })
    }

    /// Maps `f` over `items` with at most `fanout` running at once, keeping order.
    fn fan_out<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        if items.len() <= 1 {
            return items.iter().map(&f).collect();
        }
        let fanout = self.cfg.budgets.fanout.max(1);
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(fanout) {
            let f = &f;
            thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|item| s.spawn(move || f(item))).collect();
                out.extend(handles.into_iter().map(|h| h.join().expect("pipeline worker panicked")));
            });
        }
        out
    }
}
