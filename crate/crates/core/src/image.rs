//! Image references carried by packets and looks.
//!
//! Accepted forms: `base64:<data>`, `data:<mime>;base64,<data>`, `file://<path>`
//! or a bare filesystem path.

use std::fmt;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image reference is empty")]
    Empty,
    #[error("invalid inline base64 image: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("remote image references are not fetched: {0}")]
    Remote(String),
    #[error("reading image {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn inline(bytes: &[u8]) -> Self {
        Self(format!("base64:{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.trim().is_empty()
    }

    pub fn resolve(&self) -> Result<Vec<u8>, ImageError> {
        self.resolve_from(None)
    }

    /// Resolves relative paths against `base` when given.
    pub fn resolve_from(&self, base: Option<&Path>) -> Result<Vec<u8>, ImageError> {
        let s = self.0.trim();
        if s.is_empty() {
            return Err(ImageError::Empty);
        }
        let engine = &base64::engine::general_purpose::STANDARD;
        let bytes = if let Some(data) = s.strip_prefix("base64:") {
            engine.decode(data)?
        } else if s.starts_with("data:") {
            let data = s.split_once(";base64,").map(|(_, d)| d).unwrap_or("");
            engine.decode(data)?
        } else if s.starts_with("http://") || s.starts_with("https://") {
            return Err(ImageError::Remote(s.to_owned()));
        } else {
            let raw = s.strip_prefix("file://").unwrap_or(s);
            let mut path = PathBuf::from(raw);
            if path.is_relative() {
                if let Some(base) = base {
                    path = base.join(path);
                }
            }
            std::fs::read(&path).map_err(|source| ImageError::Io {
                path: path.display().to_string(),
                source,
            })?
        };
        if bytes.is_empty() {
            return Err(ImageError::Empty);
        }
        Ok(bytes)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageRef {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}
