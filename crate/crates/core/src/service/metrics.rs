use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

/// Upper bucket bounds in milliseconds; a final `+Inf` bucket is implied.
pub const BUCKETS_MS: [f64; 12] = [1.0, 2.0, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 2500.0, 5000.0];

#[derive(Debug, Default)]
pub struct Histogram {
    buckets: [AtomicU64; BUCKETS_MS.len() + 1],
    sum_us: AtomicU64,
    count: AtomicU64,
}

impl Histogram {
    pub fn observe(&self, ms: f64) {
        let i = BUCKETS_MS.iter().position(|b| ms <= *b).unwrap_or(BUCKETS_MS.len());
        self.buckets[i].fetch_add(1, Ordering::Relaxed);
        self.sum_us.fetch_add((ms.max(0.0) * 1e3) as u64, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    fn render(&self, out: &mut String, name: &str, stage: &str) {
        let mut cumulative = 0;
        for (i, b) in self.buckets.iter().enumerate() {
            cumulative += b.load(Ordering::Relaxed);
            let le = BUCKETS_MS.get(i).map_or("+Inf".to_owned(), |v| v.to_string());
            let _ = writeln!(out, "{name}_bucket{{stage=\"{stage}\",le=\"{le}\"}} {cumulative}");
        }
        let sum = self.sum_us.load(Ordering::Relaxed) as f64 / 1e3;
        let _ = writeln!(out, "{name}_sum{{stage=\"{stage}\"}} {sum}");
        let _ = writeln!(out, "{name}_count{{stage=\"{stage}\"}} {}", self.count());
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub requests: AtomicU64,
    pub search_errors: AtomicU64,
    pub degraded_responses: AtomicU64,
    /// Layers that fell back from the judge to crop cosine or retrieval order.
    pub fallback_invocations: AtomicU64,
    pub ingest_accepted: AtomicU64,
    pub ingest_rejected: AtomicU64,
    pub querygen_ms: Histogram,
    pub embed_ms: Histogram,
    pub retrieve_ms: Histogram,
    pub rerank_ms: Histogram,
    pub total_ms: Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub search_errors: u64,
    pub degraded_responses: u64,
    pub fallback_invocations: u64,
    pub ingest_accepted: u64,
    pub ingest_rejected: u64,
    pub dead_letters: u64,
    pub index_size: u64,
}

pub(crate) fn inc(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

impl Metrics {
    pub fn snapshot(&self, index_size: u64, dead_letters: u64) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        MetricsSnapshot {
            requests: get(&self.requests),
            search_errors: get(&self.search_errors),
            degraded_responses: get(&self.degraded_responses),
            fallback_invocations: get(&self.fallback_invocations),
            ingest_accepted: get(&self.ingest_accepted),
            ingest_rejected: get(&self.ingest_rejected),
            dead_letters,
            index_size,
        }
    }

    /// Text exposition format.
    pub fn render(&self, index_size: u64, dead_letters: u64) -> String {
        let s = self.snapshot(index_size, dead_letters);
        let mut out = String::new();
        for (name, help, v) in [
            ("looksync_requests_total", "Search requests received.", s.requests),
            ("looksync_search_errors_total", "Search requests that failed.", s.search_errors),
            ("looksync_degraded_responses_total", "Responses served through a fallback path.", s.degraded_responses),
            ("looksync_fallback_invocations_total", "Layers reranked without the judge.", s.fallback_invocations),
            ("looksync_ingest_accepted_total", "Packets accepted for ingestion.", s.ingest_accepted),
            ("looksync_ingest_rejected_total", "Packets rejected at the API.", s.ingest_rejected),
            ("looksync_dead_letters_total", "Packets parked in the dead-letter list.", s.dead_letters),
        ] {
            let _ = writeln!(out, "# HELP {name} {help}\n# TYPE {name} counter\n{name} {v}");
        }
        let _ = writeln!(
            out,
            "# HELP looksync_index_size Products in the vector index.\n# TYPE looksync_index_size gauge\nlooksync_index_size {}",
            s.index_size
        );
        let name = "looksync_stage_latency_ms";
        let _ = writeln!(out, "# HELP {name} Stage latency in milliseconds.\n# TYPE {name} histogram");
        for (stage, h) in [
            ("querygen", &self.querygen_ms),
            ("embed", &self.embed_ms),
            ("retrieve", &self.retrieve_ms),
            ("rerank", &self.rerank_ms),
            ("total", &self.total_ms),
        ] {
            h.render(&mut out, name, stage);
        }
        out
    }
}
