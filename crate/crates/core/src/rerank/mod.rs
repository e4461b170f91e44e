//! Fine-grained reordering of each layer's candidates.
//!
//! The judge scores candidates against the whole look. When it fails the
//! layer's crop is embedded and candidates are ordered by cosine to it; when
//! segmentation also fails the retrieval order is kept. Degraded results are
//! flagged, never errors.

pub mod fault;
mod judge;
mod segment;

use std::cmp::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use judge::{
    validate_judgment, JudgeCandidate, JudgeClient, JudgeError, RemoteJudge, RemoteJudgeReply, RemoteJudgeRequest,
    StubJudge,
};
pub use segment::{
    CropFixture, FixtureSegmenter, RemoteSegmentReply, RemoteSegmentRequest, RemoteSegmenter, SegmentCrop,
    SegmenterClient, SegmenterError,
};

use crate::deadline::{run_until, Outcome};
use crate::embedding::{dot, Embedder};
use crate::index::VectorIndex;
use crate::ingest::MetadataStore;
use crate::querygen::LayerKey;
use crate::retrieval::CandidateSet;

/// The generated look as seen by the judge and segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct LookImage {
    pub look_id: String,
    pub image: Arc<[u8]>,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMethod {
    Judge,
    FallbackCosine,
    RetrievalOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub product_id: String,
    pub rerank_score: f32,
    pub retrieval_score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub layer_key: LayerKey,
    pub ranked: Vec<RankedItem>,
    pub method: RerankMethod,
    pub degraded: bool,
    /// Why earlier stages of the cascade were skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub causes: Vec<String>,
}

/// Rerank score descending, then retrieval score descending, then id ascending.
pub fn ranked_order(a: &RankedItem, b: &RankedItem) -> Ordering {
    b.rerank_score
        .total_cmp(&a.rerank_score)
        .then_with(|| b.retrieval_score.total_cmp(&a.retrieval_score))
        .then_with(|| a.product_id.cmp(&b.product_id))
}

fn scored(set: &CandidateSet, score: impl Fn(&str) -> f32) -> Vec<RankedItem> {
    let mut ranked: Vec<RankedItem> = set
        .hits
        .iter()
        .map(|h| RankedItem {
            product_id: h.product_id.clone(),
            rerank_score: score(&h.product_id),
            retrieval_score: h.score,
        })
        .collect();
    ranked.sort_by(ranked_order);
    ranked
}

/// The candidates unchanged, each scored by its retrieval score.
pub fn retrieval_order(set: &CandidateSet, degraded: bool, causes: Vec<String>) -> RankedResult {
    RankedResult {
        layer_key: set.layer_key,
        ranked: set
            .hits
            .iter()
            .map(|h| RankedItem {
                product_id: h.product_id.clone(),
                rerank_score: h.score,
                retrieval_score: h.score,
            })
            .collect(),
        method: RerankMethod::RetrievalOrder,
        degraded,
        causes,
    }
}

pub struct Reranker {
    judge: Arc<dyn JudgeClient>,
    segmenter: Arc<dyn SegmenterClient>,
    embedder: Arc<dyn Embedder>,
    index: Arc<VectorIndex>,
    store: Option<Arc<MetadataStore>>,
    granularity: Duration,
}

impl std::fmt::Debug for Reranker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reranker").field("granularity", &self.granularity).finish_non_exhaustive()
    }
}

impl Reranker {
    pub const DEFAULT_GRANULARITY: Duration = Duration::from_millis(50);

    pub fn new(
        judge: Arc<dyn JudgeClient>,
        segmenter: Arc<dyn SegmenterClient>,
        embedder: Arc<dyn Embedder>,
        index: Arc<VectorIndex>,
    ) -> Self {
        Self {
            judge,
            segmenter,
            embedder,
            index,
            store: None,
            granularity: Self::DEFAULT_GRANULARITY,
        }
    }

    /// Product records supply the metadata sent to the judge.
    pub fn with_store(mut self, store: Arc<MetadataStore>) -> Self {
        self.store = Some(store);
        self
    }

    /// Extra time the cosine fallback may use past the judge deadline.
    pub fn with_granularity(mut self, granularity: Duration) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn granularity(&self) -> Duration {
        self.granularity
    }

    pub fn candidates(&self, set: &CandidateSet) -> Vec<JudgeCandidate> {
        set.hits
            .iter()
            .map(|h| {
                let metadata = match self.store.as_ref().and_then(|s| s.get(&h.product_id)) {
                    Some(rec) => json!({
                        "caption": rec.caption,
                        "attributes": rec.attrs,
                        "raw": rec.raw_metadata,
                    }),
                    None => self
                        .index
                        .get(&h.product_id)
                        .map_or(Value::Null, |e| json!({ "attributes": e.attrs })),
                };
                JudgeCandidate {
                    id: h.product_id.clone(),
                    metadata,
                }
            })
            .collect()
    }

    pub fn rerank_judge(
        &self,
        look: &LookImage,
        set: &CandidateSet,
        deadline: Instant,
    ) -> Result<RankedResult, JudgeError> {
        let candidates = self.candidates(set);
        let judge = Arc::clone(&self.judge);
        let look_owned = look.clone();
        let sent = candidates.clone();
        let scores = match run_until(deadline, move || judge.judge(&look_owned, &sent)) {
            Outcome::Done(r) => r?,
            Outcome::TimedOut => return Err(JudgeError::Timeout),
            Outcome::Failed => return Err(JudgeError::Unavailable("judge call panicked".into())),
        };
        validate_judgment(&candidates, &scores)?;
        Ok(RankedResult {
            layer_key: set.layer_key,
            ranked: scored(set, |id| scores[id]),
            method: RerankMethod::Judge,
            degraded: false,
            causes: Vec::new(),
        })
    }

    pub fn rerank_fallback(
        &self,
        look: &LookImage,
        set: &CandidateSet,
        deadline: Instant,
    ) -> Result<RankedResult, SegmenterError> {
        let segmenter = Arc::clone(&self.segmenter);
        let embedder = Arc::clone(&self.embedder);
        let look = look.clone();
        let layer = set.layer_key;
        let crop = match run_until(deadline, move || {
            let crop = segmenter.segment(&look, layer)?;
            embedder
                .embed_image(&crop.image, crop.caption_sidecar.as_deref())
                .map_err(|e| SegmenterError::Unavailable(format!("crop embedding failed: {e}")))
        }) {
            Outcome::Done(r) => r?,
            Outcome::TimedOut => return Err(SegmenterError::Timeout),
            Outcome::Failed => return Err(SegmenterError::Unavailable("segmenter call panicked".into())),
        };
        let stored = self.index.lookup_many(set.hits.iter().map(|h| h.product_id.as_str()));
        Ok(RankedResult {
            layer_key: set.layer_key,
            ranked: scored(set, |id| {
                stored
                    .get(id)
                    .map_or(-1.0, |(v, _)| dot(crop.as_slice(), v.as_slice()))
            }),
            method: RerankMethod::FallbackCosine,
            degraded: true,
            causes: Vec::new(),
        })
    }

    /// Judge, then crop cosine, then retrieval order. The judge may run until
    /// `deadline`; the fallback until one granularity step past it.
    pub fn rerank(&self, look: &LookImage, set: &CandidateSet, deadline: Instant) -> RankedResult {
        if set.hits.is_empty() {
            return retrieval_order(set, false, Vec::new());
        }
        let judge_err = match self.rerank_judge(look, set, deadline) {
            Ok(r) => return r,
            Err(e) => e,
        };
        tracing::debug!(layer = %set.layer_key, error = %judge_err, "judge failed, using crop cosine");
        let mut causes = vec![judge_err.to_string()];
        match self.rerank_fallback(look, set, deadline + self.granularity) {
            Ok(mut r) => {
                r.causes = causes;
                r
            }
            Err(e) => {
                tracing::debug!(layer = %set.layer_key, error = %e, "segmenter failed, keeping retrieval order");
                causes.push(e.to_string());
                retrieval_order(set, true, causes)
            }
        }
    }
}
