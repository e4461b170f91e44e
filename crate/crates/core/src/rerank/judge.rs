use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::LookImage;
use crate::embedding::{dot, Embedder};
use crate::index::VectorIndex;
use crate::remote::{CallError, JsonClient};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("judge missed its deadline")]
    Timeout,
    #[error("invalid judgment: {0}")]
    InvalidJudgment(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCandidate {
    pub id: String,
    pub metadata: Value,
}

/// Scores candidates for visual similarity to the look. Higher is better.
pub trait JudgeClient: Send + Sync {
    fn judge(&self, look: &LookImage, candidates: &[JudgeCandidate]) -> Result<BTreeMap<String, f32>, JudgeError>;
}

/// Checks that `scores` covers exactly the candidate ids with finite values.
pub fn validate_judgment(candidates: &[JudgeCandidate], scores: &BTreeMap<String, f32>) -> Result<(), JudgeError> {
    let mut expected = HashSet::with_capacity(candidates.len());
    for c in candidates {
        if !expected.insert(c.id.as_str()) {
            return Err(JudgeError::InvalidJudgment(format!("duplicate candidate {}", c.id)));
        }
    }
    if let Some(extra) = scores.keys().find(|k| !expected.contains(k.as_str())) {
        return Err(JudgeError::InvalidJudgment(format!("unknown id {extra}")));
    }
    if let Some(missing) = candidates.iter().find(|c| !scores.contains_key(&c.id)) {
        return Err(JudgeError::InvalidJudgment(format!("missing id {}", missing.id)));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(JudgeError::InvalidJudgment(format!("non-finite score {s} for {id}")));
    }
    Ok(())
}

/// Deterministic judge: cosine between each candidate's stored vector and the
/// embedding of the whole look image.
pub struct StubJudge {
    embedder: Arc<dyn Embedder>,
    index: Arc<VectorIndex>,
}

impl StubJudge {
    pub fn new(embedder: Arc<dyn Embedder>, index: Arc<VectorIndex>) -> Self {
        Self { embedder, index }
    }
}

impl JudgeClient for StubJudge {
    fn judge(&self, look: &LookImage, candidates: &[JudgeCandidate]) -> Result<BTreeMap<String, f32>, JudgeError> {
        let q = self
            .embedder
            .embed_image(&look.image, look.caption.as_deref())
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        let stored = self.index.lookup_many(candidates.iter().map(|c| c.id.as_str()));
        candidates
            .iter()
            .map(|c| {
                let (v, _) = stored
                    .get(&c.id)
                    .ok_or_else(|| JudgeError::Unavailable(format!("no vector for {}", c.id)))?;
                Ok((c.id.clone(), dot(q.as_slice(), v.as_slice())))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJudgeRequest {
    pub look_b64: String,
    pub candidates: Vec<JudgeCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteJudgeReply {
    pub scores: BTreeMap<String, f32>,
}

#[derive(Debug)]
pub struct RemoteJudge {
    client: JsonClient,
}

impl RemoteJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout, max_in_flight),
        }
    }
}

impl JudgeClient for RemoteJudge {
    fn judge(&self, look: &LookImage, candidates: &[JudgeCandidate]) -> Result<BTreeMap<String, f32>, JudgeError> {
        let body = RemoteJudgeRequest {
            look_b64: base64::engine::general_purpose::STANDARD.encode(&look.image),
            candidates: candidates.to_vec(),
        };
        let reply: RemoteJudgeReply = self.client.post(&body).map_err(|e| match e {
            CallError::Timeout => JudgeError::Timeout,
            CallError::Unavailable(m) => JudgeError::Unavailable(m),
            CallError::BadResponse(m) => JudgeError::InvalidJudgment(m),
        })?;
        Ok(reply.scores)
    }
}
