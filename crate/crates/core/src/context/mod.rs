//! Request and container context: per-endpoint history, source and
//! destination attributes, and container resource snapshots.

mod container;
mod history;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::http_model::{CacheKey, ParsedRequest, SourceAttributes};

pub use container::{
    ContainerContext, ContainerStore, FileMetricsProvider, MetricsProvider, ProcessSampler,
    DEFAULT_CONTAINER_HORIZON, DEFAULT_SNAPSHOT_INTERVAL,
};
pub use history::{
    Aggregate, GroupBy, HistoryEntry, HistoryStore, Retention, SourceSummary, WindowQuery,
};

/// Milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_secs(s: u64) -> Self {
        Timestamp(s * 1000)
    }

    pub fn saturating_add_ms(self, ms: u64) -> Self {
        Timestamp(self.0.saturating_add(ms))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error("malformed history at line {line}: {reason}")]
    MalformedHistory { line: usize, reason: String },
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("invalid container snapshot: {0}")]
    InvalidSnapshot(String),
    #[error("metrics source: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time source for request timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock time that never goes backwards within one process.
pub struct MonotonicClock {
    base: Timestamp,
    start: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Self {
            base: Timestamp(wall.as_millis() as u64),
            start: Instant::now(),
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Timestamp {
        self.base.saturating_add_ms(self.start.elapsed().as_millis() as u64)
    }
}

/// Settable clock for tests and replays.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(AtomicU64::new(start.0))
    }

    pub fn set(&self, ts: Timestamp) {
        self.0.store(ts.0, Ordering::SeqCst);
    }

    pub fn advance_ms(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.0.load(Ordering::SeqCst))
    }
}

/// Where a request is going.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationAttributes {
    pub host: Option<String>,
    pub port: Option<u16>,
    pub path: String,
    pub query: String,
    /// Container serving the endpoint, when the deployment maps one.
    pub container: Option<String>,
}

impl DestinationAttributes {
    pub fn from_request(r: &ParsedRequest, container: Option<String>) -> Self {
        let (host, port) = match r.headers.get("host") {
            Some(h) => split_host_port(h),
            None => (None, None),
        };
        let query = r.target().split_once('?').map(|(_, q)| q.to_string()).unwrap_or_default();
        Self {
            host,
            port,
            path: r.path.clone(),
            query,
            container,
        }
    }
}

fn split_host_port(h: &str) -> (Option<String>, Option<u16>) {
    let h = h.trim();
    // bracketed IPv6 literal
    if let Some(rest) = h.strip_prefix('[') {
        if let Some((addr, tail)) = rest.split_once(']') {
            let port = tail.strip_prefix(':').and_then(|p| p.parse().ok());
            return (Some(addr.to_string()), port);
        }
    }
    match h.rsplit_once(':') {
        Some((host, port)) if !host.contains(':') => match port.parse() {
            Ok(p) => (Some(host.to_string()), Some(p)),
            Err(_) => (Some(h.to_string()), None),
        },
        _ => (Some(h.to_string()), None),
    }
}

/// Everything a policy may consult about the request being evaluated.
pub struct RequestContext<'a> {
    pub ts: Timestamp,
    pub src: &'a SourceAttributes,
    pub dest: &'a DestinationAttributes,
    pub key: &'a CacheKey,
    /// Sequence number of this request's own history entry, if recorded.
    pub entry_seq: Option<u64>,
    pub hist: &'a HistoryStore,
    pub containers: Option<&'a ContainerStore>,
    pub group_by: GroupBy,
}

impl RequestContext<'_> {
    /// Window ending at this request, excluding its own entry.
    pub fn window(&self, window: std::time::Duration) -> WindowQuery {
        WindowQuery::new(self.ts, window).excluding(self.entry_seq)
    }

    /// Same window restricted to this request's source.
    pub fn window_for_source(&self, window: std::time::Duration) -> WindowQuery {
        let src = SourceSummary::from(self.src);
        let key = src.key(self.group_by).to_string();
        self.window(window).from_source(self.group_by, key)
    }

    pub fn source_key(&self) -> String {
        SourceSummary::from(self.src).key(self.group_by).to_string()
    }
}
