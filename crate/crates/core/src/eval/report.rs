use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{GenderSegment, Highlights, MosRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub annotator_id: String,
    pub gender: GenderSegment,
    pub model_id: String,
    pub n: u64,
    pub sum: u64,
    pub mean: f64,
    /// Mean rounded half-up to two decimals, computed exactly from `sum / n`.
    pub display: String,
}

impl CellStat {
    /// Exact comparison of unrounded means.
    pub fn cmp_mean(&self, other: &Self) -> Ordering {
        (u128::from(self.sum) * u128::from(other.n)).cmp(&(u128::from(other.sum) * u128::from(self.n)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub model_a: String,
    pub model_b: String,
    /// `(overall_a / overall_b - 1) * 100`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowWinner {
    pub annotator_id: String,
    pub gender: GenderSegment,
    pub winners: Vec<String>,
    /// Models the reference marks as best for this row, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub highlighted: Vec<String>,
    /// The reference highlight disagrees with the computed winners.
    #[serde(default)]
    pub discrepancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosReport {
    pub models: Vec<String>,
    pub cells: Vec<CellStat>,
    pub row_max: Vec<RowWinner>,
    pub overall: BTreeMap<String, f64>,
    pub margins: Vec<Margin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMaxAnalysis {
    pub rows: Vec<RowWinner>,
    pub wins: BTreeMap<String, usize>,
}

/// Annotator ids sort numerically when they are numbers.
fn annotator_key(id: &str) -> (u8, u64, &str) {
    match id.parse::<u64>() {
        Ok(n) => (0, n, id),
        Err(_) => (1, 0, id),
    }
}

fn display_mean(sum: u64, n: u64) -> String {
    let hundredths = (200 * u128::from(sum) + u128::from(n)) / (2 * u128::from(n));
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

pub fn aggregate(records: &[MosRecord]) -> MosReport {
    let mut cells: BTreeMap<(String, GenderSegment, String), (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = cells
            .entry((r.annotator_id.clone(), r.gender, r.model_id.clone()))
            .or_default();
        e.0 += 1;
        e.1 += u64::from(r.score);
    }
    let mut cells: Vec<CellStat> = cells
        .into_iter()
        .map(|((annotator_id, gender, model_id), (n, sum))| CellStat {
            annotator_id,
            gender,
            model_id,
            n,
            sum,
            mean: sum as f64 / n as f64,
            display: display_mean(sum, n),
        })
        .collect();
    cells.sort_by(|a, b| {
        annotator_key(&a.annotator_id)
            .cmp(&annotator_key(&b.annotator_id))
            .then(a.gender.cmp(&b.gender))
            .then(a.model_id.cmp(&b.model_id))
    });
    let models: Vec<String> = cells
        .iter()
        .map(|c| c.model_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut overall = BTreeMap::new();
    for m in &models {
        let means: Vec<f64> = cells.iter().filter(|c| &c.model_id == m).map(|c| c.mean).collect();
        overall.insert(m.clone(), means.iter().sum::<f64>() / means.len() as f64);
    }
    let mut margins = Vec::new();
    for a in &models {
        for b in &models {
            if a != b {
                margins.push(Margin {
                    model_a: a.clone(),
                    model_b: b.clone(),
                    percent: (overall[a] / overall[b] - 1.0) * 100.0,
                });
            }
        }
    }
    let mut report = MosReport {
        models,
        cells,
        row_max: Vec::new(),
        overall,
        margins,
    };
    report.row_max = row_max_analysis(&report, None).rows;
    report
}

impl MosReport {
    pub fn cell(&self, annotator: &str, gender: GenderSegment, model: &str) -> Option<&CellStat> {
        self.cells
            .iter()
            .find(|c| c.annotator_id == annotator && c.gender == gender && c.model_id == model)
    }

    pub fn margin(&self, a: &str, b: &str) -> Option<f64> {
        self.margins
            .iter()
            .find(|m| m.model_a == a && m.model_b == b)
            .map(|m| m.percent)
    }

    /// Rows present in the report, in display order.
    pub fn rows(&self) -> Vec<(String, GenderSegment)> {
        let mut seen = Vec::<(String, GenderSegment)>::new();
        for c in &self.cells {
            if !seen.iter().any(|(a, g)| *a == c.annotator_id && *g == c.gender) {
                seen.push((c.annotator_id.clone(), c.gender));
            }
        }
        seen
    }

    /// Aligned text table; winners carry a `*`. `order` fixes the column
    /// order, defaulting to the report's sorted model list.
    pub fn render_table(&self, order: Option<&[String]>, analysis: &RowMaxAnalysis) -> String {
        let models: Vec<String> = match order {
            Some(o) => o
                .iter()
                .filter(|m| self.models.contains(m))
                .cloned()
                .chain(self.models.iter().filter(|m| !o.contains(m)).cloned())
                .collect(),
            None => self.models.clone(),
        };
        let width = models.iter().map(|m| m.len()).max().unwrap_or(0).max(8) + 2;
        let mut out = String::new();
        let _ = write!(out, "{:<10}{:<8}", "Annotator", "Gender");
        for m in &models {
            let _ = write!(out, "{m:>width$}");
        }
        out.push('\n');
        let mut last_annotator = None;
        for (annotator, gender) in self.rows() {
            let label = if last_annotator.as_deref() == Some(annotator.as_str()) {
                ""
            } else {
                annotator.as_str()
            };
            let _ = write!(out, "{:<10}{:<8}", label, gender.label());
            let winners = analysis
                .rows
                .iter()
                .find(|r| r.annotator_id == annotator && r.gender == gender)
                .map(|r| r.winners.clone())
                .unwrap_or_default();
            for m in &models {
                let cell = match self.cell(&annotator, gender, m) {
                    Some(c) if winners.contains(m) => format!("*{}", c.display),
                    Some(c) => c.display.clone(),
                    None => "-".into(),
                };
                let _ = write!(out, "{cell:>width$}");
            }
            out.push('\n');
            last_annotator = Some(annotator);
        }
        let _ = write!(out, "{:<18}", "Overall");
        for m in &models {
            let v = self.overall.get(m).map_or("-".into(), |v| format!("{v:.3}"));
            let _ = write!(out, "{v:>width$}");
        }
        out.push_str("\n\n");
        for a in &models {
            for b in &models {
                if let (true, Some(p)) = (a != b, self.margin(a, b)) {
                    if p > 0.0 {
                        let _ = writeln!(out, "margin {a} vs {b}: {p:+.2}%");
                    }
                }
            }
        }
        for m in &models {
            let _ = writeln!(
                out,
                "rows won by {m}: {}/{}",
                analysis.wins.get(m).copied().unwrap_or(0),
                analysis.rows.len()
            );
        }
        for r in analysis.rows.iter().filter(|r| r.discrepancy) {
            let detail: Vec<String> = r
                .winners
                .iter()
                .chain(r.highlighted.iter())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter_map(|m| self.cell(&r.annotator_id, r.gender, m).map(|c| format!("{m} {}", c.display)))
                .collect();
            let _ = writeln!(
                out,
                "flag: row ({}, {}) highlights {} but the highest mean is {} ({})",
                r.annotator_id,
                r.gender.label(),
                r.highlighted.join(", "),
                r.winners.join(", "),
                detail.join(" vs "),
            );
        }
        out
    }
}

/// Per-row argmax over unrounded means, compared against optional reference
/// highlights. Ties make every tied model a winner.
pub fn row_max_analysis(report: &MosReport, highlights: Option<&Highlights>) -> RowMaxAnalysis {
    let mut rows = Vec::new();
    let mut wins: BTreeMap<String, usize> = report.models.iter().map(|m| (m.clone(), 0)).collect();
    for (annotator, gender) in report.rows() {
        let cells: Vec<&CellStat> = report
            .cells
            .iter()
            .filter(|c| c.annotator_id == annotator && c.gender == gender)
            .collect();
        let Some(best) = cells.iter().copied().max_by(|a, b| a.cmp_mean(b)) else {
            continue;
        };
        let winners: Vec<String> = cells
            .iter()
            .filter(|c| c.cmp_mean(best) == Ordering::Equal)
            .map(|c| c.model_id.clone())
            .collect();
        for w in &winners {
            *wins.entry(w.clone()).or_default() += 1;
        }
        let highlighted = highlights
            .and_then(|h| h.get(&annotator, gender))
            .map(<[String]>::to_vec)
            .unwrap_or_default();
        let discrepancy = !highlighted.is_empty()
            && highlighted.iter().collect::<BTreeSet<_>>() != winners.iter().collect::<BTreeSet<_>>();
        rows.push(RowWinner {
            annotator_id: annotator,
            gender,
            winners,
            highlighted,
            discrepancy,
        });
    }
    RowMaxAnalysis { rows, wins }
}
