use std::fs::{self, File};
use std::io::{BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use super::{Ingestor, UpdatePacket};
use crate::embedding::fnv1a64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("queue transport error: {0}")]
    Transport(String),
    #[error("queue is full")]
    Full,
    #[error("queue is closed")]
    Closed,
}

#[derive(Debug, Clone)]
pub struct Delivery {
    /// Opaque acknowledgement handle.
    pub tag: u64,
    /// The parsed packet, or the reason it could not be parsed.
    pub payload: Result<UpdatePacket, String>,
    pub raw: String,
}

#[derive(Debug)]
pub enum Polled {
    Item(Delivery),
    Idle,
    Closed,
}

pub trait PacketQueue: Send {
    fn poll(&mut self, timeout: Duration) -> Result<Polled, QueueError>;
    fn ack(&mut self, tag: u64) -> Result<(), QueueError>;
}

/// Newline-delimited JSON log with a committed byte offset kept next to it
/// in `<file>.offset`. Reopening resumes after the last acknowledged line.
#[derive(Debug)]
pub struct FileQueue {
    reader: BufReader<File>,
    offset_path: PathBuf,
    pos: u64,
    committed: u64,
    follow: bool,
}

impl FileQueue {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut offset_path = path.as_os_str().to_owned();
        offset_path.push(".offset");
        let offset_path = PathBuf::from(offset_path);
        let committed = match fs::read_to_string(&offset_path) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("offset file: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let mut file = File::open(path)?;
        file.seek(SeekFrom::Start(committed))?;
        Ok(Self {
            reader: BufReader::new(file),
            offset_path,
            pos: committed,
            committed,
            follow: false,
        })
    }

    /// Keep waiting for appended lines at end of file instead of closing.
    pub fn follow(mut self, follow: bool) -> Self {
        self.follow = follow;
        self
    }

    pub fn committed_offset(&self) -> u64 {
        self.committed
    }
}

fn transport(e: std::io::Error) -> QueueError {
    QueueError::Transport(e.to_string())
}

impl PacketQueue for FileQueue {
    fn poll(&mut self, timeout: Duration) -> Result<Polled, QueueError> {
        loop {
            let mut buf = Vec::new();
            let n = self.reader.read_until(b'\n', &mut buf).map_err(transport)?;
            if n == 0 {
                if !self.follow {
                    return Ok(Polled::Closed);
                }
                thread::sleep(timeout.min(Duration::from_millis(20)));
                return Ok(Polled::Idle);
            }
            if buf.last() != Some(&b'\n') && self.follow {
                // A writer is mid-append; retry from the start of the line later.
                self.reader.seek(SeekFrom::Start(self.pos)).map_err(transport)?;
                thread::sleep(timeout.min(Duration::from_millis(20)));
                return Ok(Polled::Idle);
            }
            self.pos += n as u64;
            let raw = String::from_utf8_lossy(&buf).trim().to_owned();
            if raw.is_empty() {
                continue;
            }
            let payload = UpdatePacket::parse(&raw);
            return Ok(Polled::Item(Delivery {
                tag: self.pos,
                payload,
                raw,
            }));
        }
    }

    fn ack(&mut self, tag: u64) -> Result<(), QueueError> {
        if tag <= self.committed {
            return Ok(());
        }
        let tmp = self.offset_path.with_extension("offset.tmp");
        fs::write(&tmp, tag.to_string()).map_err(transport)?;
        fs::rename(&tmp, &self.offset_path).map_err(transport)?;
        self.committed = tag;
        Ok(())
    }
}

/// In-process bounded channel. The queue closes once every sender is dropped
/// and the backlog is drained.
#[derive(Debug)]
pub struct ChannelQueue {
    rx: Receiver<Result<UpdatePacket, String>>,
    next_tag: u64,
}

#[derive(Debug, Clone)]
pub struct ChannelSender {
    tx: SyncSender<Result<UpdatePacket, String>>,
}

impl ChannelQueue {
    pub fn bounded(capacity: usize) -> (ChannelSender, ChannelQueue) {
        let (tx, rx) = mpsc::sync_channel(capacity);
        (ChannelSender { tx }, ChannelQueue { rx, next_tag: 0 })
    }
}

impl ChannelSender {
    pub fn send(&self, packet: UpdatePacket) -> Result<(), QueueError> {
        self.tx.send(Ok(packet)).map_err(|_| QueueError::Closed)
    }

    pub fn try_send(&self, packet: UpdatePacket) -> Result<(), QueueError> {
        self.tx.try_send(Ok(packet)).map_err(|e| match e {
            TrySendError::Full(_) => QueueError::Full,
            TrySendError::Disconnected(_) => QueueError::Closed,
        })
    }

    /// Sends a line as received from a producer; it is parsed by the consumer.
    pub fn send_raw(&self, line: &str) -> Result<(), QueueError> {
        let item = UpdatePacket::parse(line).map_err(|e| format!("{e}\u{0}{line}"));
        self.tx.send(item).map_err(|_| QueueError::Closed)
    }
}

impl PacketQueue for ChannelQueue {
    fn poll(&mut self, timeout: Duration) -> Result<Polled, QueueError> {
        match self.rx.recv_timeout(timeout) {
            Ok(item) => {
                self.next_tag += 1;
                let (payload, raw) = match item {
                    Ok(p) => {
                        let raw = serde_json::to_string(&p).unwrap_or_default();
                        (Ok(p), raw)
                    }
                    Err(packed) => {
                        let (reason, raw) = packed.split_once('\u{0}').unwrap_or((packed.as_str(), ""));
                        (Err(reason.to_owned()), raw.to_owned())
                    }
                };
                Ok(Polled::Item(Delivery {
                    tag: self.next_tag,
                    payload,
                    raw,
                }))
            }
            Err(RecvTimeoutError::Timeout) => Ok(Polled::Idle),
            Err(RecvTimeoutError::Disconnected) => Ok(Polled::Closed),
        }
    }

    fn ack(&mut self, _tag: u64) -> Result<(), QueueError> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConsumerOptions {
    pub poll_timeout: Duration,
    pub max_retries: u32,
    pub base_backoff: Duration,
    pub max_backoff: Duration,
    /// Return as soon as the queue reports no pending packets.
    pub stop_when_idle: bool,
}

impl Default for ConsumerOptions {
    fn default() -> Self {
        Self {
            poll_timeout: Duration::from_millis(50),
            max_retries: 5,
            base_backoff: Duration::from_millis(10),
            max_backoff: Duration::from_secs(1),
            stop_when_idle: false,
        }
    }
}

impl ConsumerOptions {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_backoff.saturating_mul(1u32 << attempt.min(20)).min(self.max_backoff)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConsumerStats {
    pub consumed: u64,
    pub acked: u64,
    pub applied: u64,
    pub duplicates: u64,
    pub dead_lettered: u64,
}

impl std::ops::AddAssign for ConsumerStats {
    fn add_assign(&mut self, o: Self) {
        self.consumed += o.consumed;
        self.acked += o.acked;
        self.applied += o.applied;
        self.duplicates += o.duplicates;
        self.dead_lettered += o.dead_lettered;
    }
}

#[derive(Debug, Error)]
#[error("{error} (after {} consumed)", stats.consumed)]
pub struct ConsumerFailure {
    pub error: QueueError,
    pub stats: ConsumerStats,
}

fn with_retry<T>(
    opts: &ConsumerOptions,
    shutdown: &AtomicBool,
    mut op: impl FnMut() -> Result<T, QueueError>,
) -> Result<T, QueueError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(QueueError::Transport(msg)) if attempt < opts.max_retries && !shutdown.load(Ordering::Relaxed) => {
                let wait = opts.backoff(attempt);
                tracing::warn!(%msg, attempt, ?wait, "queue transport error, retrying");
                thread::sleep(wait);
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Drains `queue` into `ingestor` until it closes, goes idle (when asked to)
/// or `shutdown` is raised. Every delivery is acknowledged after it has been
/// applied or parked, so `consumed == acked` on return.
pub fn run_consumer(
    queue: &mut dyn PacketQueue,
    ingestor: &Ingestor,
    shutdown: &AtomicBool,
    opts: &ConsumerOptions,
) -> Result<ConsumerStats, ConsumerFailure> {
    let mut stats = ConsumerStats::default();
    while !shutdown.load(Ordering::Relaxed) {
        let polled = with_retry(opts, shutdown, || queue.poll(opts.poll_timeout))
            .map_err(|error| ConsumerFailure { error, stats })?;
        let delivery = match polled {
            Polled::Closed => break,
            Polled::Idle if opts.stop_when_idle => break,
            Polled::Idle => continue,
            Polled::Item(d) => d,
        };
        match &delivery.payload {
            Ok(packet) => match ingestor.process_packet(packet) {
                Ok(r) if r.duplicate => stats.duplicates += 1,
                Ok(_) => stats.applied += 1,
                Err(e) => {
                    tracing::warn!(packet = %packet.packet_id, error = %e, "packet parked");
                    stats.dead_lettered += 1;
                }
            },
            Err(reason) => {
                tracing::warn!(%reason, "poison packet parked");
                ingestor.park_raw(&delivery.raw, reason);
                stats.dead_lettered += 1;
            }
        }
        stats.consumed += 1;
        with_retry(opts, shutdown, || queue.ack(delivery.tag)).map_err(|error| ConsumerFailure { error, stats })?;
        stats.acked += 1;
    }
    Ok(stats)
}

/// A fixed pool of consumers. Packets are routed by a hash of `product_id`,
/// so updates to one product are applied in submission order.
#[derive(Debug)]
pub struct IngestWorkers {
    senders: Vec<ChannelSender>,
    handles: Vec<JoinHandle<Result<ConsumerStats, ConsumerFailure>>>,
    shutdown: Arc<AtomicBool>,
}

impl IngestWorkers {
    pub fn spawn(ingestor: Arc<Ingestor>, workers: usize, capacity: usize) -> Self {
        let workers = workers.max(1);
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut senders = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for i in 0..workers {
            let (tx, mut queue) = ChannelQueue::bounded(capacity.max(1));
            let ingestor = Arc::clone(&ingestor);
            let stop = Arc::clone(&shutdown);
            let handle = thread::Builder::new()
                .name(format!("ingest-{i}"))
                .spawn(move || run_consumer(&mut queue, &ingestor, &stop, &ConsumerOptions::default()))
                .expect("spawn ingest worker");
            senders.push(tx);
            handles.push(handle);
        }
        Self {
            senders,
            handles,
            shutdown,
        }
    }

    fn route(&self, product_id: &str) -> &ChannelSender {
        &self.senders[(fnv1a64(product_id.as_bytes()) % self.senders.len() as u64) as usize]
    }

    /// Blocks while the target worker's queue is full.
    pub fn submit(&self, packet: UpdatePacket) -> Result<(), QueueError> {
        self.route(&packet.product_id).send(packet)
    }

    pub fn try_submit(&self, packet: UpdatePacket) -> Result<(), QueueError> {
        self.route(&packet.product_id).try_send(packet)
    }

    /// Closes the queues, lets the workers drain them and joins.
    pub fn finish(self) -> Result<ConsumerStats, ConsumerFailure> {
        drop(self.senders);
        join_all(self.handles)
    }

    /// Stops the workers after their current packet; queued packets are dropped unacknowledged.
    pub fn abort(self) -> Result<ConsumerStats, ConsumerFailure> {
        self.shutdown.store(true, Ordering::Relaxed);
        drop(self.senders);
        join_all(self.handles)
    }
}

fn join_all(
    handles: Vec<JoinHandle<Result<ConsumerStats, ConsumerFailure>>>,
) -> Result<ConsumerStats, ConsumerFailure> {
    let mut total = ConsumerStats::default();
    let mut failure = None;
    for h in handles {
        match h.join().expect("ingest worker panicked") {
            Ok(s) => total += s,
            Err(f) => {
                total += f.stats;
                failure.get_or_insert(f.error);
            }
        }
    }
    match failure {
        Some(error) => Err(ConsumerFailure { error, stats: total }),
        None => Ok(total),
    }
}
