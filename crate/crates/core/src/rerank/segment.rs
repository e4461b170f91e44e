use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::LookImage;
use crate::image::ImageRef;
use crate::querygen::LayerKey;
use crate::remote::{CallError, JsonClient};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmenterError {
    #[error("segmenter unavailable: {0}")]
    Unavailable(String),
    #[error("segmenter timed out")]
    Timeout,
}

/// The part of a look image showing one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCrop {
    pub layer_key: LayerKey,
    pub image: Vec<u8>,
    pub caption_sidecar: Option<String>,
}

pub trait SegmenterClient: Send + Sync {
    fn segment(&self, look: &LookImage, layer: LayerKey) -> Result<SegmentCrop, SegmenterError>;
}

/// One row of a crop fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropFixture {
    pub look_id: String,
    pub layer: LayerKey,
    pub image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Serves crops from a fixture table keyed by look and layer. Pairs without
/// a fixture get the whole look image and its caption.
#[derive(Debug, Default, Clone)]
pub struct FixtureSegmenter {
    crops: HashMap<(String, LayerKey), SegmentCrop>,
}

impl FixtureSegmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, look_id: &str, layer: LayerKey, image: Vec<u8>, caption: Option<String>) {
        self.crops.insert(
            (look_id.to_owned(), layer),
            SegmentCrop {
                layer_key: layer,
                image,
                caption_sidecar: caption,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crops.is_empty()
    }

    /// Loads a JSON array of [`CropFixture`]; relative image paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let rows: Vec<CropFixture> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut seg = Self::new();
        for row in rows {
            let bytes = row
                .image
                .resolve_from(path.parent())
                .map_err(|e| format!("crop for {}/{}: {e}", row.look_id, row.layer))?;
            seg.insert(&row.look_id, row.layer, bytes, row.caption);
        }
        Ok(seg)
    }
}

impl SegmenterClient for FixtureSegmenter {
    fn segment(&self, look: &LookImage, layer: LayerKey) -> Result<SegmentCrop, SegmenterError> {
        Ok(self
            .crops
            .get(&(look.look_id.clone(), layer))
            .cloned()
            .unwrap_or_else(|| SegmentCrop {
                layer_key: layer,
                image: look.image.to_vec(),
                caption_sidecar: look.caption.clone(),
            }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSegmentRequest {
    pub look_b64: String,
    pub layer: LayerKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSegmentReply {
    pub crop_b64: String,
}

#[derive(Debug)]
pub struct RemoteSegmenter {
    client: JsonClient,
}

impl RemoteSegmenter {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint, timeout, max_in_flight),
        }
    }
}

impl SegmenterClient for RemoteSegmenter {
    fn segment(&self, look: &LookImage, layer: LayerKey) -> Result<SegmentCrop, SegmenterError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = RemoteSegmentRequest {
            look_b64: b64.encode(&look.image),
            layer,
        };
        let reply: RemoteSegmentReply = self.client.post(&body).map_err(|e| match e {
            CallError::Timeout => SegmenterError::Timeout,
            CallError::Unavailable(m) | CallError::BadResponse(m) => SegmenterError::Unavailable(m),
        })?;
        let image = b64
            .decode(reply.crop_b64.as_bytes())
            .map_err(|e| SegmenterError::Unavailable(format!("crop is not base64: {e}")))?;
        if image.is_empty() {
            return Err(SegmenterError::Unavailable("empty crop".into()));
        }
        Ok(SegmentCrop {
            layer_key: layer,
            image,
            caption_sidecar: None,
        })
    }
}
