use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedderConfig;
use crate::index::AnnParams;
use crate::rerank::fault::{JudgeFault, SegmenterFault};
use crate::retrieval::RetrievalConfig;

pub const ENV_PREFIX: &str = "LOOKSYNC_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Fractions of a request deadline given to each stage. The remainder after
/// query generation, retrieval and rerank is slack for the metadata join.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub deadline_ms: u64,
    pub max_deadline_ms: u64,
    pub querygen_pct: u32,
    pub retrieval_pct: u32,
    pub rerank_pct: u32,
    pub slack_pct: u32,
    /// Extra time the rerank fallback may take past its budget.
    pub granularity_ms: u64,
    /// Layers retrieved and reranked concurrently per request.
    pub fanout: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            deadline_ms: 1000,
            max_deadline_ms: 1000,
            querygen_pct: 30,
            retrieval_pct: 20,
            rerank_pct: 40,
            slack_pct: 10,
            granularity_ms: 50,
            fanout: 8,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), String> {
        let total = self.querygen_pct + self.retrieval_pct + self.rerank_pct + self.slack_pct;
        if total != 100 {
            return Err(format!("stage percentages sum to {total}, expected 100"));
        }
        if self.deadline_ms > self.max_deadline_ms {
            return Err(format!(
                "deadline_ms {} exceeds max_deadline_ms {}",
                self.deadline_ms, self.max_deadline_ms
            ));
        }
        if self.fanout == 0 {
            return Err("fanout must be positive".into());
        }
        Ok(())
    }

    pub fn granularity(&self) -> Duration {
        Duration::from_millis(self.granularity_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    /// Query generator endpoint; the caption-driven stub when absent.
    pub generator_endpoint: Option<String>,
    /// Judge endpoint; the look-cosine stub when absent.
    pub judge_endpoint: Option<String>,
    /// Segmenter endpoint; fixture crops when absent.
    pub segmenter_endpoint: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
    /// JSON crop fixture table for the stub segmenter.
    pub crops_fixture: Option<PathBuf>,
    pub prompt_file: Option<PathBuf>,
    pub judge_fault: JudgeFault,
    pub segmenter_fault: SegmenterFault,
}

impl ClientsConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms.unwrap_or(2000))
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.unwrap_or(16)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Index file loaded at start and saved on shutdown.
    pub index_path: Option<PathBuf>,
    pub dead_letter_path: Option<PathBuf>,
    /// Score CSV backing the MOS endpoint.
    pub scores_path: Option<PathBuf>,
    /// JSON task list served to annotators.
    pub annotation_tasks: Option<PathBuf>,
    /// Base directory for relative image paths.
    pub image_base: Option<PathBuf>,
    pub ingest_workers: usize,
    pub queue_capacity: usize,
    pub plan_cache_entries: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            index_path: None,
            dead_letter_path: None,
            scores_path: None,
            annotation_tasks: None,
            image_base: None,
            ingest_workers: 4,
            queue_capacity: 1024,
            plan_cache_entries: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub embedder: EmbedderConfig,
    pub index: AnnParams,
    pub retrieval: RetrievalConfig,
    pub budgets: BudgetConfig,
    pub clients: ClientsConfig,
    pub server: ServerConfig,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.retrieval.validate().map_err(ConfigError::Invalid)?;
        self.budgets.validate().map_err(ConfigError::Invalid)?;
        if self.embedder.dim == 0 {
            return Err(ConfigError::Invalid("embedder.dim must be positive".into()));
        }
        Ok(())
    }

    /// Parses TOML text, then applies overrides, then validates.
    pub fn from_toml_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (key, value) in env {
            apply_override(&mut root, &key, &value)?;
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the optional config file and applies `LOOKSYNC_` environment
    /// overrides. `LOOKSYNC_BUDGETS__DEADLINE_MS=800` sets `budgets.deadline_ms`.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_owned(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))
    }
}

fn apply_override(root: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
        return Ok(());
    };
    let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::Invalid(format!("malformed override {key}")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.clone(), parse_scalar(value));
    Ok(())
}

/// Numbers and booleans keep their type; anything else is a string.
fn parse_scalar(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => match t.remove("v") {
            Some(v @ (toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_))) => v,
            _ => toml::Value::String(value.to_owned()),
        },
        Err(_) => toml::Value::String(value.to_owned()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbedderMode;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let cfg = ServiceConfig::from_toml_with_env("", []).unwrap();
        assert_eq!(cfg.embedder.dim, 1024);
        assert_eq!(cfg.retrieval.k_retrieve, 50);
        assert_eq!(cfg.budgets.deadline_ms, 1000);
        assert_eq!(cfg.index.ef_search, 100);
    }

    #[test]
    fn file_then_env() {
        let text = "[embedder]\ndim = 64\n[budgets]\ndeadline_ms = 900\n";
        let cfg = ServiceConfig::from_toml_with_env(
            text,
            env(&[
                ("LOOKSYNC_BUDGETS__DEADLINE_MS", "800"),
                ("LOOKSYNC_EMBEDDER__MODE", "remote"),
                ("LOOKSYNC_EMBEDDER__REMOTE_ENDPOINT", "http://127.0.0.1:9/embed"),
                ("LOOKSYNC_RETRIEVAL__ENFORCE_GENDER", "false"),
                ("LOOKSYNC_SERVER__BIND", "0.0.0.0:9000"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.embedder.dim, 64);
        assert_eq!(cfg.budgets.deadline_ms, 800);
        assert_eq!(cfg.embedder.mode, EmbedderMode::Remote);
        assert!(!cfg.retrieval.enforce_gender);
        assert_eq!(cfg.server.bind, "0.0.0.0:9000");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_budgets() {
        assert!(ServiceConfig::from_toml_with_env("[budgets]\nbogus = 1\n", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("[budgets]\nrerank_pct = 50\n", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("[budgets]\ndeadline_ms = 5000\n", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("[retrieval]\ntop_n = 0\n", []).is_err());
        assert!(ServiceConfig::from_toml_with_env("", env(&[("LOOKSYNC_BUDGETS__", "1")])).is_err());
    }

    #[test]
    fn fault_injection_from_config() {
        let cfg = ServiceConfig::from_toml_with_env("[clients]\njudge_fault = { slow = 1500 }\nsegmenter_fault = \"down\"\n", [])
            .unwrap();
        assert_eq!(cfg.clients.judge_fault, JudgeFault::Slow(Duration::from_millis(1500)));
        assert_eq!(cfg.clients.segmenter_fault, SegmenterFault::Down);
    }
}
