//! `looksync` operator CLI.
//!
//! Exit codes: 0 success, 1 usage, 2 bad input data, 3 I/O, 4 latency budget exceeded.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use looksync::eval::{self, MosError, ReferenceTable};
use looksync::index::IndexParams;
use looksync::service::{
    self, bench, load_index, synth, BuildError, BuildOptions, Metrics, Pipeline, SearchError, SearchRequest,
    SearchResponse, Service, ServiceConfig, ServiceError,
};

#[derive(Debug, Parser)]
#[command(name = "looksync", version, about = "Visual product search for generated looks")]
struct Cli {
    /// TOML config file; LOOKSYNC_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an index file from an ndjson packet log.
    Build {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dead-letter unparseable lines instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run one look through the pipeline.
    Search {
        #[arg(long)]
        index: PathBuf,
        /// JSON look descriptor (optionally with top_n / deadline_ms).
        #[arg(long)]
        look: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Replay synthetic looks and report latency percentiles.
    Bench {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        requests: u64,
        #[arg(long, default_value_t = 1000)]
        deadline: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        workers: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate a score CSV into the MOS table.
    MosReport {
        #[arg(long)]
        scores: PathBuf,
        /// Reference table whose highlights are checked against the computed row maxima.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write a score CSV whose cell means reproduce a reference table.
    MosFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        per_cell: u64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Write a seeded synthetic catalog and looks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Directory for look JSON files.
        #[arg(long)]
        looks_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        looks: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Io(String),
    Budget(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Io(_) => 3,
            Self::Budget(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Io(m) | Self::Budget(m) => m,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Io { .. } => Self::Io(e.to_string()),
            ServiceError::Index(looksync::index::IndexError::Io(_)) => Self::Io(e.to_string()),
            ServiceError::Config(service::ConfigError::Io { .. }) => Self::Io(e.to_string()),
            ServiceError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig, Failure> {
    ServiceConfig::load(path).map_err(|e| match e {
        service::ConfigError::Io { .. } => Failure::Io(e.to_string()),
        other => Failure::Usage(other.to_string()),
    })
}

/// Writes to stdout, treating a closed pipe as success.
fn write_out(text: &str) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Io(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

macro_rules! outln {
    ($($arg:tt)*) => {
        write_out(&format!("{}\n", format_args!($($arg)*)))
    };
}

fn emit_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    outln!("{text}")
}

/// Loads an index and adopts its dimension for the embedder.
fn open_pipeline(mut cfg: ServiceConfig, index_path: &Path) -> Result<Pipeline, Failure> {
    if !index_path.exists() {
        return Err(io_err(index_path, "no such file"));
    }
    let (index, store) = load_index(index_path)?;
    cfg.embedder.dim = index.dim();
    Pipeline::from_config(cfg, Arc::new(index), Arc::new(store), Arc::new(Metrics::default()))
        .map_err(|e| Failure::from(ServiceError::from(e)))
}

fn cmd_build(cfg: ServiceConfig, catalog: &Path, out: &Path, lenient: bool, json: bool) -> Result<(), Failure> {
    let embedder = cfg.embedder.build().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut params = IndexParams::new(cfg.embedder.dim);
    params.ann = cfg.index;
    let report = service::bulk_build(
        catalog,
        out,
        params,
        embedder,
        cfg.server.image_base.as_deref(),
        BuildOptions { strict: !lenient },
    )
    .map_err(|e| match e {
        BuildError::Io { .. } => Failure::Io(e.to_string()),
        BuildError::CorruptInput { .. } => Failure::Data(e.to_string()),
        BuildError::Index(looksync::index::IndexError::Io(_)) => Failure::Io(e.to_string()),
        BuildError::Index(_) => Failure::Data(e.to_string()),
    })?;
    if json {
        return emit_json(&report);
    }
    outln!(
        "built {} products from {} lines in {:.0} ms -> {}",
        report.count,
        report.lines,
        report.wall_ms,
        report.index_path.display()
    )?;
    if report.dead_letters > 0 {
        outln!("dead letters: {}", report.dead_letters)?;
        for line in &report.malformed_lines {
            outln!("  malformed line {line}")?;
        }
    }
    Ok(())
}

fn render_search(resp: &SearchResponse) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,"look {}{}", resp.look_id, if resp.degraded { " (degraded)" } else { "" });
    for layer in &resp.layers {
        let flags: Vec<&str> = layer.degraded_flags.iter().map(String::as_str).collect();
        let _ = writeln!(
            s,
            "[{}] {} | {:?}{}",
            layer.layer_key,
            layer.query,
            layer.method,
            if flags.is_empty() { String::new() } else { format!(" [{}]", flags.join(", ")) }
        );
        for (i, p) in layer.products.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:>2}. {:<16} {:>7.4} {:>7.4}  {}",
                i + 1,
                p.product_id,
                p.rerank_score,
                p.retrieval_score,
                p.caption.as_deref().unwrap_or("")
            );
        }
    }
    let t = &resp.timings;
    let _ = writeln!(
        s,
        "timings ms: querygen {:.1} embed {:.1} retrieve {:.1} rerank {:.1} join {:.1} total {:.1}",
        t.querygen_ms, t.embed_ms, t.retrieve_ms, t.rerank_ms, t.join_ms, t.total_ms
    );
    s
}

fn cmd_search(mut cfg: ServiceConfig, index: &Path, look: &Path, json: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(look).map_err(|e| io_err(look, e))?;
    let req: SearchRequest =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", look.display())))?;
    if cfg.server.image_base.is_none() {
        cfg.server.image_base = look.parent().map(Path::to_path_buf);
    }
    let pipeline = open_pipeline(cfg, index)?;
    let resp = pipeline.handle_search(&req).map_err(|e| match e {
        SearchError::IndexUnavailable(_) => Failure::Io(e.to_string()),
        other => Failure::Data(other.to_string()),
    })?;
    if json {
        emit_json(&resp)
    } else {
        write_out(&render_search(&resp))
    }
}

fn cmd_bench(mut cfg: ServiceConfig, index: &Path, opts: bench::BenchOptions, seed: u64, json: bool) -> Result<(), Failure> {
    cfg.budgets.max_deadline_ms = cfg.budgets.max_deadline_ms.max(opts.deadline_ms);
    let pipeline = open_pipeline(cfg, index)?;
    let looks = synth::looks(opts.requests, seed);
    let report = bench::run(&pipeline, &looks, opts);
    if json {
        emit_json(&report)?;
    } else {
        write_out(&report.render())?;
    }
    if report.within_budget() {
        Ok(())
    } else {
        Err(Failure::Budget(format!(
            "p95 end-to-end {:.2} ms exceeds the {} ms deadline",
            report.total().p95,
            opts.deadline_ms
        )))
    }
}

fn cmd_mos_report(scores: &Path, reference: Option<&Path>, json: bool) -> Result<(), Failure> {
    let records = eval::load_csv(scores).map_err(|e| match e {
        MosError::Io(_) => io_err(scores, e),
        other => Failure::Data(format!("{}: {other}", scores.display())),
    })?;
    let table = match reference {
        Some(p) => ReferenceTable::load(p).map_err(Failure::Data)?,
        None => ReferenceTable::default(),
    };
    let report = eval::aggregate(&records);
    let highlights = table.highlights();
    let analysis = eval::row_max_analysis(&report, Some(&highlights));
    if json {
        emit_json(&serde_json::json!({ "report": report, "row_max": analysis }))
    } else {
        write_out(&report.render_table(Some(&table.models), &analysis))
    }
}

fn cmd_mos_fixture(out: &Path, reference: Option<&Path>, per_cell: u64) -> Result<(), Failure> {
    let table = match reference {
        Some(p) => ReferenceTable::load(p).map_err(Failure::Data)?,
        None => ReferenceTable::default(),
    };
    let start = chrono_epoch();
    let records = eval::generate_fixture(&table, per_cell, start).map_err(Failure::Data)?;
    let f = std::fs::File::create(out).map_err(|e| io_err(out, e))?;
    eval::write_csv(f, &records).map_err(|e| io_err(out, e))?;
    outln!("wrote {} records to {}", records.len(), out.display())?;
    Ok(())
}

// Fixed timestamp so fixture files are byte-for-byte reproducible.
fn chrono_epoch() -> chrono::DateTime<chrono::Utc> {
    "2025-01-01T00:00:00Z".parse().expect("valid timestamp")
}

fn cmd_serve(mut cfg: ServiceConfig, bind: Option<String>, index: Option<PathBuf>) -> Result<(), Failure> {
    if let Some(b) = bind {
        cfg.server.bind = b;
    }
    if let Some(i) = index {
        cfg.server.index_path = Some(i);
    }
    if let Some(p) = cfg.server.index_path.as_deref().filter(|p| p.exists()) {
        let header = looksync::index::VectorIndex::load(p).map_err(|e| Failure::from(ServiceError::from(e)))?;
        cfg.embedder.dim = header.dim();
    }
    let bind = cfg.server.bind.clone();
    let svc = Arc::new(Service::from_config(cfg)?);
    service::http::run(svc, &bind).map_err(Failure::from)
}

fn cmd_synth(out: &Path, count: usize, seed: u64, looks_dir: Option<&Path>, looks: usize) -> Result<(), Failure> {
    let mut buf = Vec::new();
    for p in synth::catalog(count, seed) {
        serde_json::to_writer(&mut buf, &p).map_err(|e| Failure::Data(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::File::create(out)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(out, e))?;
    outln!("wrote {count} packets to {}", out.display())?;
    if let Some(dir) = looks_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for l in synth::looks(looks, seed) {
            let path = dir.join(format!("{}.json", l.look_id));
            let text = serde_json::to_string_pretty(&l).map_err(|e| Failure::Data(e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
        outln!("wrote {looks} looks to {}", dir.display())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = || load_config(cli.config.as_deref());
    match cli.command {
        Command::Build {
            catalog,
            out,
            lenient,
            json,
        } => cmd_build(cfg()?, &catalog, &out, lenient, json),
        Command::Search { index, look, json } => cmd_search(cfg()?, &index, &look, json),
        Command::Bench {
            index,
            requests,
            deadline,
            workers,
            seed,
            json,
        } => cmd_bench(
            cfg()?,
            &index,
            bench::BenchOptions {
                requests: requests as usize,
                deadline_ms: deadline,
                workers: workers as usize,
            },
            seed,
            json,
        ),
        Command::MosReport { scores, reference, json } => cmd_mos_report(&scores, reference.as_deref(), json),
        Command::MosFixture {
            out,
            reference,
            per_cell,
        } => cmd_mos_fixture(&out, reference.as_deref(), per_cell),
        Command::Serve { bind, index } => cmd_serve(cfg()?, bind, index),
        Command::Synth {
            out,
            count,
            seed,
            looks_dir,
            looks,
        } => cmd_synth(&out, count, seed, looks_dir.as_deref(), looks),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
