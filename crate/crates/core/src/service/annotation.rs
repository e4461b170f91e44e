//! Annotation task queue behind `GET /v1/annotation/next` and the blinding
//! map `POST /v1/mos` uses to turn a label back into a model id.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::embedding::fnv1a64;
use crate::eval::{GenderSegment, MosError, MosRecord, ScoreStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCard {
    pub product_id: String,
    #[serde(default)]
    pub image: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<String>,
}

/// Server-side task definition, including the real model id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub look_id: String,
    pub look_image: String,
    pub gender: GenderSegment,
    #[serde(default = "default_layer")]
    pub layer: String,
    pub model_id: String,
    #[serde(default)]
    pub candidates: Vec<CandidateCard>,
}

fn default_layer() -> String {
    "outfit".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLook {
    pub look_id: String,
    pub image: String,
}

/// What an annotator sees. Carries the blinded label only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub look: TaskLook,
    pub model_id: String,
    pub gender_segment: GenderSegment,
    pub layer: String,
    pub candidates: Vec<CandidateCard>,
}

/// A score as posted by a client. `model_id` may be a blinded label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosSubmission {
    pub annotator_id: String,
    #[serde(alias = "gender_segment")]
    pub gender: GenderSegment,
    pub model_id: String,
    pub look_id: String,
    #[serde(alias = "layer_key", default = "default_layer")]
    pub layer: String,
    pub score: i64,
    #[serde(default)]
    pub rated_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Default)]
pub struct AnnotationQueue {
    tasks: Vec<TaskSpec>,
    // (look_id, model_id) -> label, and the reverse.
    labels: HashMap<(String, String), String>,
    models: HashMap<(String, String), String>,
}

fn label_for(i: usize) -> String {
    let mut n = i;
    let mut s = String::new();
    loop {
        s.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    format!("System {s}")
}

impl AnnotationQueue {
    /// Labels are assigned per look in an order keyed on a hash of the look
    /// and model, so they are stable across restarts but not alphabetical.
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self, String> {
        let mut seen = BTreeSet::new();
        let mut per_look: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for t in &tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(format!("duplicate task_id {}", t.task_id));
            }
            per_look.entry(&t.look_id).or_default().insert(&t.model_id);
        }
        let mut labels = HashMap::new();
        let mut models = HashMap::new();
        for (look, ms) in per_look {
            let mut ms: Vec<&str> = ms.into_iter().collect();
            ms.sort_by_key(|m| (fnv1a64(format!("{look}\u{1f}{m}").as_bytes()), *m));
            for (i, m) in ms.into_iter().enumerate() {
                let label = label_for(i);
                labels.insert((look.to_owned(), m.to_owned()), label.clone());
                models.insert((look.to_owned(), label), m.to_owned());
            }
        }
        Ok(Self { tasks, labels, models })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let tasks: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::new(tasks)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn label(&self, look_id: &str, model_id: &str) -> Option<&str> {
        self.labels
            .get(&(look_id.to_owned(), model_id.to_owned()))
            .map(String::as_str)
    }

    pub fn model_for(&self, look_id: &str, label: &str) -> Option<&str> {
        self.models
            .get(&(look_id.to_owned(), label.to_owned()))
            .map(String::as_str)
    }

    /// First task in file order the annotator has not scored yet.
    pub fn next_for(&self, annotator: &str, scores: &ScoreStore) -> Option<AnnotationTask> {
        self.tasks
            .iter()
            .find(|t| !scores.contains(annotator, &t.model_id, &t.look_id, &t.layer))
            .map(|t| AnnotationTask {
                task_id: t.task_id.clone(),
                look: TaskLook {
                    look_id: t.look_id.clone(),
                    image: t.look_image.clone(),
                },
                model_id: self.label(&t.look_id, &t.model_id).unwrap_or_default().to_owned(),
                gender_segment: t.gender,
                layer: t.layer.clone(),
                candidates: t.candidates.clone(),
            })
    }

    /// Resolves a blinded label and validates the score. Unknown labels pass
    /// through unchanged so plain records can be posted too.
    pub fn resolve(&self, sub: MosSubmission, now: DateTime<Utc>) -> Result<MosRecord, MosError> {
        let score = u8::try_from(sub.score)
            .ok()
            .filter(|s| (1..=5).contains(s))
            .ok_or(MosError::InvalidScore(sub.score))?;
        let model_id = self
            .model_for(&sub.look_id, &sub.model_id)
            .map(str::to_owned)
            .unwrap_or(sub.model_id);
        let rec = MosRecord {
            annotator_id: sub.annotator_id,
            gender: sub.gender,
            model_id,
            look_id: sub.look_id,
            layer: sub.layer,
            score,
            rated_at: sub.rated_at.unwrap_or(now),
        };
        rec.validate()?;
        Ok(rec)
    }
}
