//! Shared text/image embedding space.
//!
//! Every stage that compares products and queries goes through an [`Embedder`]
//! and the [`dot`]/[`cosine_similarity`] kernels defined here.

mod hashing;
mod remote;
mod vector;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hashing::{fnv1a64, tokenize, HashEmbedder};
pub use remote::{RemoteEmbedder, RemoteEmbedRequest, RemoteEmbedResponse};
pub use vector::{cosine_similarity, dot, EmbeddingVector, VectorError, UNIT_NORM_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("query text has no alphanumeric tokens")]
    EmptyQuery,
    #[error("image payload is empty")]
    EmptyImage,
    #[error("token hashes cancelled out to a zero vector")]
    Degenerate,
    #[error("embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("embedding service timed out")]
    RemoteTimeout,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid vector: {0}")]
    InvalidVector(VectorError),
}

impl From<VectorError> for EmbedError {
    fn from(e: VectorError) -> Self {
        match e {
            VectorError::DimensionMismatch { expected, got } => Self::DimensionMismatch { expected, got },
            other => Self::InvalidVector(other),
        }
    }
}

/// Produces unit vectors in the shared space. Implementations are immutable
/// after construction and shared freely across threads.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_image(&self, image: &[u8], caption: Option<&str>) -> Result<EmbeddingVector, EmbedError>;
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed_text(text)
    }

    fn embed_image(&self, image: &[u8], caption: Option<&str>) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed_image(image, caption)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderMode {
    TestDeterministic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub mode: EmbedderMode,
    pub remote_endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            mode: EmbedderMode::TestDeterministic,
            remote_endpoint: None,
            timeout_ms: 500,
            max_in_flight: 16,
        }
    }
}

impl EmbedderConfig {
    pub fn with_dim(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::DimensionMismatch { expected: 1, got: 0 });
        }
        match self.mode {
            EmbedderMode::TestDeterministic => Ok(Arc::new(HashEmbedder::new(self.dim))),
            EmbedderMode::Remote => {
                let endpoint = self
                    .remote_endpoint
                    .clone()
                    .ok_or_else(|| EmbedError::RemoteUnavailable("no remote_endpoint configured".into()))?;
                Ok(Arc::new(RemoteEmbedder::new(
                    endpoint,
                    self.dim,
                    std::time::Duration::from_millis(self.timeout_ms),
                    self.max_in_flight,
                )))
            }
        }
    }
}

/// Embeds `text` with a fresh embedder built from `cfg`.
pub fn embed_text(text: &str, cfg: &EmbedderConfig) -> Result<EmbeddingVector, EmbedError> {
    cfg.build()?.embed_text(text)
}

/// Embeds an image with a fresh embedder built from `cfg`.
pub fn embed_image(image: &[u8], caption: Option<&str>, cfg: &EmbedderConfig) -> Result<EmbeddingVector, EmbedError> {
    cfg.build()?.embed_image(image, caption)
}
