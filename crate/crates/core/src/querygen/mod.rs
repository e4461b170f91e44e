//! Query generation: turns a look into a per-layer query plan through a
//! pluggable generator and enforces the plan grammar.

mod plan;
mod remote;
mod stub;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::attributes::Gender;
use crate::deadline::{run_until, Outcome};
use crate::image::ImageRef;

pub use plan::{validate_plan, LayerKey, PlanViolation, QueryPlan, MAX_QUERY_CHARS};
pub use remote::{RemoteGenerator, RemoteGeneratorReply, RemoteGeneratorRequest};
pub use stub::StubGenerator;

const DEFAULT_PROMPT: &str = include_str!("../../data/prompt_v1.txt");

/// Explicit shopper preferences carried on a request.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct UserPrefs {
    pub brands: BTreeSet<String>,
    pub sizes: BTreeSet<String>,
    pub price_min: Option<u64>,
    pub price_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookDescriptor {
    pub look_id: String,
    pub image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_gender: Option<Gender>,
    #[serde(default)]
    pub geography: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prefs: Option<UserPrefs>,
}

impl LookDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        if self.look_id.trim().is_empty() {
            return Err("look_id is empty".into());
        }
        if self.image.is_empty() {
            return Err("image is empty".into());
        }
        Ok(())
    }
}

/// Versioned prompt sent to remote generators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub text: String,
}

impl PromptTemplate {
    /// Loads a template; the version is the file stem (`prompt_v2.txt` → `prompt_v2`).
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self { version, text })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: "prompt_v1".into(),
            text: DEFAULT_PROMPT.into(),
        }
    }
}

/// Everything a generator sees for one call.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub look: LookDescriptor,
    pub image: Arc<[u8]>,
    pub prompt: Arc<PromptTemplate>,
    /// Violations from the previous attempt when this is a repair call.
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeneratorError {
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    #[error("generator timed out")]
    Timeout,
}

pub trait GeneratorClient: Send + Sync {
    /// Returns the raw layer object; validation happens in [`generate_queries`].
    fn generate(&self, req: &GenerationRequest) -> Result<Map<String, Value>, GeneratorError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryGenError {
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("generator timed out")]
    GeneratorTimeout,
    #[error("invalid query plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<PlanViolation>),
    #[error("invalid look: {0}")]
    InvalidLook(String),
}

impl From<GeneratorError> for QueryGenError {
    fn from(e: GeneratorError) -> Self {
        match e {
            GeneratorError::Unavailable(m) => Self::GeneratorUnavailable(m),
            GeneratorError::Timeout => Self::GeneratorTimeout,
        }
    }
}

/// Produces a validated plan, re-prompting once with the violation list if the
/// first reply breaks the grammar.
pub fn generate_queries(
    look: &LookDescriptor,
    image: Arc<[u8]>,
    generator: Arc<dyn GeneratorClient>,
    prompt: Arc<PromptTemplate>,
    deadline: Option<Instant>,
) -> Result<QueryPlan, QueryGenError> {
    look.validate().map_err(QueryGenError::InvalidLook)?;
    let mut req = GenerationRequest {
        look: look.clone(),
        image,
        prompt,
        violations: Vec::new(),
    };
    let first = call(&generator, &req, deadline)?;
    let violations = match validate_plan(&first) {
        Ok(plan) => return Ok(plan),
        Err(v) => v,
    };
    tracing::debug!(look_id = %look.look_id, ?violations, "repairing query plan");
    req.violations = violations.iter().map(ToString::to_string).collect();
    let second = call(&generator, &req, deadline)?;
    validate_plan(&second).map_err(QueryGenError::InvalidPlan)
}

fn call(
    generator: &Arc<dyn GeneratorClient>,
    req: &GenerationRequest,
    deadline: Option<Instant>,
) -> Result<Map<String, Value>, QueryGenError> {
    let Some(deadline) = deadline else {
        return Ok(generator.generate(req)?);
    };
    let generator = Arc::clone(generator);
    let req = req.clone();
    match run_until(deadline, move || generator.generate(&req)) {
        Outcome::Done(r) => Ok(r?),
        Outcome::TimedOut => Err(QueryGenError::GeneratorTimeout),
        Outcome::Failed => Err(QueryGenError::GeneratorUnavailable("generator call panicked".into())),
    }
}
