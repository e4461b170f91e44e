//! Human mean-opinion-score collection and aggregation.

mod fixture;
mod report;

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixture::{generate_fixture, scores_for_mean, Highlights, ReferenceRow, ReferenceTable};
pub use report::{aggregate, row_max_analysis, CellStat, Margin, MosReport, RowMaxAnalysis, RowWinner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderSegment {
    Male,
    Female,
}

impl GenderSegment {
    pub fn label(self) -> &'static str {
        match self {
            Self::Male => "Male",
            Self::Female => "Female",
        }
    }
}

impl fmt::Display for GenderSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Male => "male",
            Self::Female => "female",
        })
    }
}

impl FromStr for GenderSegment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Self::Male),
            "female" | "f" => Ok(Self::Female),
            other => Err(format!("unknown gender segment {other:?}")),
        }
    }
}

/// One judgment. Field names match the score CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosRecord {
    pub annotator_id: String,
    pub gender: GenderSegment,
    pub model_id: String,
    pub look_id: String,
    pub layer: String,
    pub score: u8,
    pub rated_at: DateTime<Utc>,
}

impl MosRecord {
    pub fn validate(&self) -> Result<(), MosError> {
        if !(1..=5).contains(&self.score) {
            return Err(MosError::InvalidScore(i64::from(self.score)));
        }
        for (name, v) in [
            ("annotator_id", &self.annotator_id),
            ("model_id", &self.model_id),
            ("look_id", &self.look_id),
        ] {
            if v.trim().is_empty() {
                return Err(MosError::MissingField(name));
            }
        }
        Ok(())
    }

    fn key(&self) -> (String, String, String, String) {
        (
            self.annotator_id.clone(),
            self.model_id.clone(),
            self.look_id.clone(),
            self.layer.clone(),
        )
    }
}

#[derive(Debug, Error)]
pub enum MosError {
    #[error("score {0} is outside 1-5")]
    InvalidScore(i64),
    #[error("{0} is empty")]
    MissingField(&'static str),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Judgments keyed by (annotator, model, look, layer); a later record for the
/// same key replaces the earlier one.
#[derive(Debug, Default)]
pub struct ScoreStore {
    inner: RwLock<StoreInner>,
}

#[derive(Debug, Default)]
struct StoreInner {
    slots: HashMap<(String, String, String, String), usize>,
    records: Vec<MosRecord>,
}

impl ScoreStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, rec: MosRecord) -> Result<(), MosError> {
        rec.validate()?;
        let mut g = self.inner.write();
        let key = rec.key();
        match g.slots.get(&key) {
            Some(&i) => g.records[i] = rec,
            None => {
                let i = g.records.len();
                g.slots.insert(key, i);
                g.records.push(rec);
            }
        }
        Ok(())
    }

    pub fn contains(&self, annotator: &str, model: &str, look: &str, layer: &str) -> bool {
        let key = (annotator.to_owned(), model.to_owned(), look.to_owned(), layer.to_owned());
        self.inner.read().slots.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.inner.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records in first-insertion order of their keys.
    pub fn snapshot(&self) -> Vec<MosRecord> {
        self.inner.read().records.clone()
    }

    pub fn from_records(records: impl IntoIterator<Item = MosRecord>) -> Result<Self, MosError> {
        let s = Self::new();
        for r in records {
            s.record(r)?;
        }
        Ok(s)
    }
}

pub const CSV_HEADER: [&str; 7] = ["annotator_id", "gender", "model_id", "look_id", "layer", "score", "rated_at"];

#[derive(Deserialize)]
struct CsvRow {
    annotator_id: String,
    gender: String,
    model_id: String,
    look_id: String,
    layer: String,
    score: String,
    rated_at: String,
}

/// Reads score rows. Extra columns are ignored. Errors carry the file line.
pub fn read_csv(reader: impl Read) -> Result<Vec<MosRecord>, MosError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MosError::Malformed { line: 1, reason: e.to_string() })?
        .clone();
    if let Some(missing) = CSV_HEADER.iter().find(|h| !headers.iter().any(|x| x == **h)) {
        return Err(MosError::Malformed {
            line: 1,
            reason: format!("missing column {missing}"),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MosError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: CsvRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| MosError::Malformed { line, reason: e.to_string() })?;
        out.push(parse_row(row).map_err(|reason| MosError::Malformed { line, reason })?);
    }
    Ok(out)
}

fn parse_row(row: CsvRow) -> Result<MosRecord, String> {
    let score: i64 = row.score.parse().map_err(|_| format!("score {:?} is not an integer", row.score))?;
    if !(1..=5).contains(&score) {
        return Err(format!("score {score} is outside 1-5"));
    }
    let rated_at = DateTime::parse_from_rfc3339(&row.rated_at)
        .map_err(|e| format!("rated_at {:?}: {e}", row.rated_at))?
        .with_timezone(&Utc);
    let rec = MosRecord {
        annotator_id: row.annotator_id,
        gender: row.gender.parse()?,
        model_id: row.model_id,
        look_id: row.look_id,
        layer: row.layer,
        score: score as u8,
        rated_at,
    };
    rec.validate().map_err(|e| e.to_string())?;
    Ok(rec)
}

pub fn load_csv(path: &Path) -> Result<Vec<MosRecord>, MosError> {
    read_csv(std::fs::File::open(path)?)
}

pub fn write_csv(writer: impl Write, records: &[MosRecord]) -> Result<(), MosError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_io)?;
    for r in records {
        let score = r.score.to_string();
        let at = r.rated_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let gender = r.gender.to_string();
        w.write_record([
            r.annotator_id.as_str(),
            gender.as_str(),
            r.model_id.as_str(),
            r.look_id.as_str(),
            r.layer.as_str(),
            score.as_str(),
            at.as_str(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> MosError {
    MosError::Io(std::io::Error::other(e))
}
