use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{GenerationRequest, GeneratorClient, GeneratorError};
use crate::remote::{CallError, JsonClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteGeneratorRequest {
    pub image_b64: String,
    pub prompt_version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub prompt: String,
    /// Present only on the repair attempt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteGeneratorReply {
    pub layers: Value,
}

#[derive(Debug)]
pub struct RemoteGenerator {
    client: JsonClient,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout, max_in_flight),
        }
    }
}

impl GeneratorClient for RemoteGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<Map<String, Value>, GeneratorError> {
        let body = RemoteGeneratorRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(&req.image),
            prompt_version: req.prompt.version.clone(),
            prompt: req.prompt.text.clone(),
            violations: req.violations.clone(),
        };
        let reply: RemoteGeneratorReply = self.client.post(&body).map_err(|e| match e {
            CallError::Timeout => GeneratorError::Timeout,
            CallError::Unavailable(m) | CallError::BadResponse(m) => GeneratorError::Unavailable(m),
        })?;
        // A non-object reply validates as an empty plan and triggers repair.
        Ok(match reply.layers {
            Value::Object(map) => map,
            _ => Map::new(),
        })
    }
}
