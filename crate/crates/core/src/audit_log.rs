//! Out-of-band request log. Producers enqueue into a bounded queue that drops
//! the oldest record when full; one background thread writes JSON lines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::queue::ArrayQueue;
use serde::{Deserialize, Serialize};

use crate::context::Timestamp;
use crate::http_model::CacheKey;
use crate::policy::{Outcome, Reason};
use crate::tagging::TagSource;

pub const DEFAULT_QUEUE_CAPACITY: usize = 65_536;

/// One logged request. There is no map of variable values, only the names
/// of the request parameters that filled each variable. A deny reason may
/// still quote the value it rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: Timestamp,
    pub trace_id: String,
    pub key: CacheKey,
    pub client_ip: String,
    pub tags: Vec<String>,
    pub tag_source: TagSource,
    pub param_names: BTreeMap<String, String>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deciding_policy: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<Reason>,
    /// Time spent in the proxy pipeline.
    pub pipeline_us: u64,
    /// End-to-end time including the upstream round trip, when forwarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_status: Option<u16>,
}

/// Which records reach the sink. Deny and Audit are always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sampling {
    /// Write one Allow record out of every `allow_one_in`; 0 or 1 writes all.
    pub allow_one_in: u64,
}

struct Shared {
    queue: ArrayQueue<LogRecord>,
    dropped: AtomicU64,
    written: AtomicU64,
    sampled_out: AtomicU64,
    allow_seen: AtomicU64,
    closed: AtomicBool,
}

/// Handle to the log. Cloning shares the same queue.
#[derive(Clone)]
pub struct AuditLog {
    shared: Arc<Shared>,
    sampling: Sampling,
    waker: Option<std::thread::Thread>,
    worker: Arc<parking_lot::Mutex<Option<JoinHandle<()>>>>,
}

impl AuditLog {
    /// Starts the writer thread.
    pub fn start(sink: Box<dyn Write + Send>, capacity: usize, sampling: Sampling) -> Self {
        let shared = Arc::new(Shared {
            queue: ArrayQueue::new(capacity.max(1)),
            dropped: AtomicU64::new(0),
            written: AtomicU64::new(0),
            sampled_out: AtomicU64::new(0),
            allow_seen: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        });
        let worker_shared = shared.clone();
        let handle = std::thread::Builder::new()
            .name("audit-log".into())
            .spawn(move || write_loop(worker_shared, sink))
            .expect("spawn audit log writer");
        Self {
            shared,
            sampling,
            waker: Some(handle.thread().clone()),
            worker: Arc::new(parking_lot::Mutex::new(Some(handle))),
        }
    }

    /// Never blocks. When the queue is full the oldest record is dropped.
    pub fn emit(&self, record: LogRecord) {
        if record.outcome == Outcome::Allow && self.sampling.allow_one_in > 1 {
            let n = self.shared.allow_seen.fetch_add(1, Ordering::Relaxed);
            if !n.is_multiple_of(self.sampling.allow_one_in) {
                self.shared.sampled_out.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
        if self.shared.queue.force_push(record).is_some() {
            self.shared.dropped.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(t) = &self.waker {
            t.unpark();
        }
    }

    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    pub fn written(&self) -> u64 {
        self.shared.written.load(Ordering::Relaxed)
    }

    pub fn sampled_out(&self) -> u64 {
        self.shared.sampled_out.load(Ordering::Relaxed)
    }

    pub fn pending(&self) -> usize {
        self.shared.queue.len()
    }

    /// Drains the queue and stops the writer. Later `emit` calls are queued
    /// but never written.
    pub fn shutdown(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        let handle = self.worker.lock().take();
        if let Some(h) = handle {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

fn write_loop(shared: Arc<Shared>, sink: Box<dyn Write + Send>) {
    let mut out = std::io::BufWriter::new(sink);
    loop {
        let mut wrote = false;
        while let Some(rec) = shared.queue.pop() {
            let res = serde_json::to_writer(&mut out, &rec)
                .map_err(std::io::Error::from)
                .and_then(|_| out.write_all(b"\n"));
            match res {
                Ok(()) => {
                    shared.written.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => tracing::warn!("audit log write failed: {e}"),
            }
            wrote = true;
        }
        if wrote {
            let _ = out.flush();
        }
        if shared.closed.load(Ordering::SeqCst) && shared.queue.is_empty() {
            let _ = out.flush();
            return;
        }
        std::thread::park_timeout(Duration::from_millis(50));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogReadError {
    #[error("malformed log record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a log written by [`AuditLog`].
pub fn read_log(input: impl BufRead) -> Result<Vec<LogRecord>, LogReadError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LogReadError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
