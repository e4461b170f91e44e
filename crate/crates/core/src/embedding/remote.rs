use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedder, EmbeddingVector};
use crate::remote::{CallError, JsonClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "lowercase")]
pub enum RemoteEmbedRequest {
    Text(String),
    /// Base64-encoded image bytes.
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedResponse {
    pub dim: usize,
    pub values: Vec<f32>,
}

/// Client for an external embedding service.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout, max_in_flight),
            dim,
        }
    }

    fn call(&self, req: &RemoteEmbedRequest) -> Result<EmbeddingVector, EmbedError> {
        let resp: RemoteEmbedResponse = self.client.post(req).map_err(|e| match e {
            CallError::Timeout => EmbedError::RemoteTimeout,
            CallError::Unavailable(m) | CallError::BadResponse(m) => EmbedError::RemoteUnavailable(m),
        })?;
        if resp.dim != self.dim || resp.values.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: if resp.dim != self.dim { resp.dim } else { resp.values.len() },
            });
        }
        Ok(EmbeddingVector::normalize(resp.values)?)
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if super::tokenize(text).is_empty() {
            return Err(EmbedError::EmptyQuery);
        }
        self.call(&RemoteEmbedRequest::Text(text.to_owned()))
    }

    fn embed_image(&self, image: &[u8], _caption: Option<&str>) -> Result<EmbeddingVector, EmbedError> {
        if image.is_empty() {
            return Err(EmbedError::EmptyImage);
        }
        let payload = base64::engine::general_purpose::STANDARD.encode(image);
        self.call(&RemoteEmbedRequest::Image(payload))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_shape() {
        let json = serde_json::to_value(RemoteEmbedRequest::Text("red dress".into())).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "text", "payload": "red dress"}));
        let json = serde_json::to_value(RemoteEmbedRequest::Image("aGk=".into())).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "image", "payload": "aGk="}));
    }

    #[test]
    fn unreachable_service() {
        let e = RemoteEmbedder::new("http://127.0.0.1:9/embed", 4, Duration::from_millis(200), 2);
        assert!(matches!(e.embed_text("red"), Err(EmbedError::RemoteUnavailable(_))));
        assert!(matches!(e.embed_text("  "), Err(EmbedError::EmptyQuery)));
    }
}
