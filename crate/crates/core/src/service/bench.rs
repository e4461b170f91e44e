//! Request replay with per-stage latency percentiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::pipeline::{Pipeline, SearchRequest, StageTimings};
use crate::querygen::LookDescriptor;

pub const STAGES: [&str; 6] = ["querygen", "embed", "retrieve", "rerank", "join", "total"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub requests: usize,
    pub deadline_ms: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
    pub mean: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl StageStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        xs.sort_by(f64::total_cmp);
        let mean = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        Self {
            p50: percentile(&xs, 50.0),
            p95: percentile(&xs, 95.0),
            p99: percentile(&xs, 99.0),
            max: xs.last().copied().unwrap_or(0.0),
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub requests: usize,
    pub deadline_ms: u64,
    pub errors: usize,
    pub degraded: usize,
    pub index_size: usize,
    /// End-to-end figures include failed requests; stage figures cover successes.
    pub stages: BTreeMap<String, StageStats>,
}

impl BenchReport {
    pub fn total(&self) -> StageStats {
        self.stages.get("total").copied().unwrap_or_default()
    }

    pub fn within_budget(&self) -> bool {
        self.requests > 0 && self.total().p95 <= self.deadline_ms as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "requests {}  errors {}  degraded {}  index {}  deadline {} ms",
            self.requests, self.errors, self.degraded, self.index_size, self.deadline_ms
        );
        let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}", "stage", "p50", "p95", "p99", "max", "mean");
        for name in STAGES {
            if let Some(s) = self.stages.get(name) {
                let _ = writeln!(
                    out,
                    "{name:<10} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                    s.p50, s.p95, s.p99, s.max, s.mean
                );
            }
        }
        let verdict = if self.within_budget() { "within" } else { "over" };
        let _ = writeln!(out, "p95 end-to-end {:.2} ms: {verdict} budget", self.total().p95);
        out
    }
}

/// Replays `opts.requests` searches, cycling through `looks`.
pub fn run(pipeline: &Pipeline, looks: &[LookDescriptor], opts: BenchOptions) -> BenchReport {
    struct Sample {
        timings: Option<StageTimings>,
        wall_ms: f64,
        degraded: bool,
    }
    let samples = Mutex::new(Vec::with_capacity(opts.requests));
    let next = AtomicUsize::new(0);
    if !looks.is_empty() {
        std::thread::scope(|s| {
            for _ in 0..opts.workers.max(1) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= opts.requests {
                        break;
                    }
                    let req = SearchRequest {
                        look: looks[i % looks.len()].clone(),
                        top_n: None,
                        deadline_ms: Some(opts.deadline_ms),
                    };
                    let t = Instant::now();
                    let out = pipeline.handle_search(&req);
                    let wall_ms = t.elapsed().as_secs_f64() * 1e3;
                    let sample = match out {
                        Ok(r) => Sample {
                            timings: Some(r.timings),
                            wall_ms,
                            degraded: r.degraded,
                        },
                        Err(_) => Sample {
                            timings: None,
                            wall_ms,
                            degraded: false,
                        },
                    };
                    samples.lock().push(sample);
                });
            }
        });
    }
    let samples = samples.into_inner();
    let ok: Vec<StageTimings> = samples.iter().filter_map(|s| s.timings).collect();
    let mut stages = BTreeMap::new();
    let stage = |f: fn(&StageTimings) -> f64| StageStats::from_samples(ok.iter().map(f).collect());
    stages.insert("querygen".to_owned(), stage(|t| t.querygen_ms));
    stages.insert("embed".to_owned(), stage(|t| t.embed_ms));
    stages.insert("retrieve".to_owned(), stage(|t| t.retrieve_ms));
    stages.insert("rerank".to_owned(), stage(|t| t.rerank_ms));
    stages.insert("join".to_owned(), stage(|t| t.join_ms));
    stages.insert(
        "total".to_owned(),
        StageStats::from_samples(samples.iter().map(|s| s.wall_ms).collect()),
    );
    BenchReport {
        requests: samples.len(),
        deadline_ms: opts.deadline_ms,
        errors: samples.len() - ok.len(),
        degraded: samples.iter().filter(|s| s.degraded).count(),
        index_size: pipeline.index().len(),
        stages,
    }
}
