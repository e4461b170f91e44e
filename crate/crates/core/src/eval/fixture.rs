//! Reference mean-opinion table and a generator for score sets that
//! reproduce it exactly.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::{GenderSegment, MosRecord};

const DEFAULT_REFERENCE: &str = include_str!("../../data/mos_reference.toml");

#[derive(Debug, Deserialize)]
struct RawTable {
    models: Vec<String>,
    row: Vec<RawRow>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    annotator: String,
    gender: GenderSegment,
    means: Vec<String>,
    #[serde(default)]
    highlight: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub annotator_id: String,
    pub gender: GenderSegment,
    /// Published means in hundredths, one per model.
    pub hundredths: Vec<u64>,
    pub highlight: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub models: Vec<String>,
    pub rows: Vec<ReferenceRow>,
}

fn parse_hundredths(s: &str) -> Result<u64, String> {
    let (int, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
    if frac.len() > 2 || int.is_empty() || !(int.bytes().chain(frac.bytes())).all(|b| b.is_ascii_digit()) {
        return Err(format!("mean {s:?} is not a decimal with at most two places"));
    }
    let frac = format!("{frac:0<2}");
    Ok(int.parse::<u64>().map_err(|e| e.to_string())? * 100 + frac.parse::<u64>().map_err(|e| e.to_string())?)
}

impl ReferenceTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let raw: RawTable = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut rows = Vec::with_capacity(raw.row.len());
        for r in raw.row {
            if r.means.len() != raw.models.len() {
                return Err(format!(
                    "row ({}, {}) has {} means for {} models",
                    r.annotator,
                    r.gender,
                    r.means.len(),
                    raw.models.len()
                ));
            }
            if let Some(h) = r.highlight.iter().find(|h| !raw.models.contains(h)) {
                return Err(format!("highlight {h:?} is not a listed model"));
            }
            rows.push(ReferenceRow {
                annotator_id: r.annotator,
                gender: r.gender,
                hundredths: r.means.iter().map(|m| parse_hundredths(m)).collect::<Result<_, _>>()?,
                highlight: r.highlight,
            });
        }
        Ok(Self {
            models: raw.models,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?)
    }

    pub fn mean(&self, annotator: &str, gender: GenderSegment, model: &str) -> Option<f64> {
        let col = self.models.iter().position(|m| m == model)?;
        self.rows
            .iter()
            .find(|r| r.annotator_id == annotator && r.gender == gender)
            .map(|r| r.hundredths[col] as f64 / 100.0)
    }

    pub fn highlights(&self) -> Highlights {
        Highlights(
            self.rows
                .iter()
                .map(|r| ((r.annotator_id.clone(), r.gender), r.highlight.clone()))
                .collect(),
        )
    }
}

impl Default for ReferenceTable {
    fn default() -> Self {
        Self::parse(DEFAULT_REFERENCE).expect("bundled reference table parses")
    }
}

/// Models marked best per (annotator, gender) row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Highlights(BTreeMap<(String, GenderSegment), Vec<String>>);

impl Highlights {
    pub fn get(&self, annotator: &str, gender: GenderSegment) -> Option<&[String]> {
        self.0.get(&(annotator.to_owned(), gender)).map(Vec::as_slice)
    }
}

/// `n` integer scores in 1..=5 whose mean is exactly `hundredths / 100`,
/// using only the two integers around the mean.
pub fn scores_for_mean(hundredths: u64, n: u64) -> Result<Vec<u8>, String> {
    if n == 0 || (hundredths * n) % 100 != 0 {
        return Err(format!("mean {hundredths}/100 is not reachable with {n} integer scores"));
    }
    let total = hundredths * n / 100;
    let lo = total / n;
    let n_hi = total % n;
    if lo < 1 || lo > 5 || (lo == 5 && n_hi > 0) {
        return Err(format!("mean {hundredths}/100 is outside 1-5"));
    }
    let mut out = vec![(lo + 1) as u8; n_hi as usize];
    out.resize(n as usize, lo as u8);
    Ok(out)
}

/// One record per (annotator, model, look) with `per_cell` looks per gender,
/// so every cell mean equals the reference exactly.
pub fn generate_fixture(table: &ReferenceTable, per_cell: u64, start: DateTime<Utc>) -> Result<Vec<MosRecord>, String> {
    let mut out = Vec::new();
    for row in &table.rows {
        for (model, &h) in table.models.iter().zip(&row.hundredths) {
            let scores = scores_for_mean(h, per_cell)?;
            for (i, score) in scores.into_iter().enumerate() {
                out.push(MosRecord {
                    annotator_id: row.annotator_id.clone(),
                    gender: row.gender,
                    model_id: model.clone(),
                    look_id: format!("{}-look-{:03}", row.gender, i + 1),
                    layer: "outfit".into(),
                    score,
                    rated_at: start + Duration::seconds(out.len() as i64),
                });
            }
        }
    }
    Ok(out)
}
