use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::http_model::{CacheKey, SourceAttributes};
use crate::tag_params::TagDetail;
use crate::tagging::TagSet;

use super::{ContextError, Timestamp};

/// How requests are attributed to a source when counting per client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    ClientIp,
    /// First `X-Forwarded-For` hop, falling back to the peer address.
    ForwardedHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub client_ip: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forwarded_head: Option<String>,
}

impl SourceSummary {
    pub fn key(&self, group: GroupBy) -> &str {
        match group {
            GroupBy::ClientIp => &self.client_ip,
            GroupBy::ForwardedHead => self.forwarded_head.as_deref().unwrap_or(&self.client_ip),
        }
    }
}

impl From<&SourceAttributes> for SourceSummary {
    fn from(s: &SourceAttributes) -> Self {
        Self {
            client_ip: s.client_ip.to_string(),
            forwarded_head: s.forwarded_head().map(str::to_string),
        }
    }
}

/// One recorded request. Immutable once appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub seq: u64,
    pub ts: Timestamp,
    pub key: CacheKey,
    pub tags: TagSet,
    pub variables: BTreeMap<String, String>,
    pub src: SourceSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Retention {
    pub max_age: Duration,
    pub max_entries_per_key: usize,
    pub max_entries_per_tag: usize,
    /// Count-based eviction never drops entries younger than this.
    pub protected_window: Duration,
}

impl Default for Retention {
    fn default() -> Self {
        Self {
            max_age: Duration::from_secs(24 * 3600),
            max_entries_per_key: 100_000,
            max_entries_per_tag: 1_000_000,
            protected_window: Duration::ZERO,
        }
    }
}

/// Time window ending at `now`, covering `(now - window, now]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowQuery {
    pub now: Timestamp,
    pub window: Duration,
    /// Entry to leave out, normally the current request's own entry.
    pub exclude_seq: Option<u64>,
    /// Restricts to entries from one source.
    pub source: Option<(GroupBy, String)>,
}

impl WindowQuery {
    pub fn new(now: Timestamp, window: Duration) -> Self {
        Self {
            now,
            window,
            exclude_seq: None,
            source: None,
        }
    }

    pub fn excluding(mut self, seq: Option<u64>) -> Self {
        self.exclude_seq = seq;
        self
    }

    pub fn from_source(mut self, group: GroupBy, source: impl Into<String>) -> Self {
        self.source = Some((group, source.into()));
        self
    }

    fn lower_bound_ms(&self) -> i128 {
        self.now.0 as i128 - self.window.as_millis() as i128
    }

    /// Whether `e` falls in the window and passes the exclusion and source
    /// filters.
    pub fn admits(&self, e: &HistoryEntry) -> bool {
        (e.ts.0 as i128) > self.lower_bound_ms()
            && e.ts <= self.now
            && Some(e.seq) != self.exclude_seq
            && self
                .source
                .as_ref()
                .is_none_or(|(group, src)| e.src.key(*group) == src)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub sum: f64,
    /// Entries in the window whose field parsed and matched the filter.
    pub counted: usize,
    /// Entries in the window with the field absent, non-numeric or
    /// negative. Aggregated fields are counts, and a negative value would
    /// let a denied request offset later ones.
    pub skipped: usize,
}

#[derive(Default)]
struct Inner {
    per_key: HashMap<CacheKey, VecDeque<Arc<HistoryEntry>>>,
    by_tag: HashMap<String, VecDeque<Arc<HistoryEntry>>>,
}

/// Per-endpoint request history plus a per-tag index used for cross
/// endpoint counting. Each deque is kept sorted by timestamp.
pub struct HistoryStore {
    inner: RwLock<Inner>,
    retention: Retention,
    next_seq: AtomicU64,
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::new(Retention::default())
    }
}

fn insert_sorted(q: &mut VecDeque<Arc<HistoryEntry>>, e: Arc<HistoryEntry>) {
    if q.back().is_none_or(|last| last.ts <= e.ts) {
        q.push_back(e);
    } else {
        let pos = q.partition_point(|x| x.ts <= e.ts);
        q.insert(pos, e);
    }
}

fn evict(q: &mut VecDeque<Arc<HistoryEntry>>, newest: Timestamp, max_age: Duration, cap: usize, protected: Duration) {
    let age_floor = newest.0.saturating_sub(max_age.as_millis() as u64);
    while q.front().is_some_and(|e| e.ts.0 < age_floor) {
        q.pop_front();
    }
    let protect_floor = newest.0.saturating_sub(protected.as_millis() as u64);
    while q.len() > cap && q.front().is_some_and(|e| protected.is_zero() || e.ts.0 <= protect_floor) {
        q.pop_front();
    }
}

impl HistoryStore {
    pub fn new(retention: Retention) -> Self {
        Self {
            inner: RwLock::new(Inner::default()),
            retention,
            next_seq: AtomicU64::new(1),
        }
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    /// Appends a finalised request and returns the stored entry.
    pub fn record_request(&self, key: &CacheKey, ts: Timestamp, src: &SourceAttributes, detail: &TagDetail) -> Arc<HistoryEntry> {
        let entry = HistoryEntry {
            seq: self.next_seq.fetch_add(1, Ordering::SeqCst),
            ts,
            key: key.clone(),
            tags: detail.tags.clone(),
            variables: detail.variables.clone(),
            src: SourceSummary::from(src),
        };
        self.append(entry)
    }

    fn append(&self, entry: HistoryEntry) -> Arc<HistoryEntry> {
        let entry = Arc::new(entry);
        let r = self.retention;
        let mut inner = self.inner.write();
        let q = inner.per_key.entry(entry.key.clone()).or_default();
        insert_sorted(q, entry.clone());
        let newest = q.back().map(|e| e.ts).unwrap_or(entry.ts);
        evict(q, newest, r.max_age, r.max_entries_per_key, r.protected_window);
        for tag in entry.tags.iter() {
            let q = inner.by_tag.entry(tag.to_string()).or_default();
            insert_sorted(q, entry.clone());
            let newest = q.back().map(|e| e.ts).unwrap_or(entry.ts);
            evict(q, newest, r.max_age, r.max_entries_per_tag, r.protected_window);
        }
        entry
    }

    /// Retained entries for `key`, oldest first.
    pub fn history(&self, key: &CacheKey) -> Vec<Arc<HistoryEntry>> {
        self.inner
            .read()
            .per_key
            .get(key)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self, key: &CacheKey) -> usize {
        self.inner.read().per_key.get(key).map_or(0, VecDeque::len)
    }

    pub fn keys(&self) -> Vec<CacheKey> {
        let mut keys: Vec<CacheKey> = self.inner.read().per_key.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Sums `field` over entries of `key` inside the window whose variables
    /// equal every `having` constraint.
    pub fn window_aggregate(
        &self,
        key: &CacheKey,
        query: &WindowQuery,
        field: &str,
        having: &BTreeMap<String, String>,
    ) -> Aggregate {
        let inner = self.inner.read();
        let Some(q) = inner.per_key.get(key) else {
            return Aggregate::default();
        };
        let lower = query.lower_bound_ms();
        // sorted by ts: skip straight to the first entry inside the window
        let start = q.partition_point(|e| (e.ts.0 as i128) <= lower);
        let mut agg = Aggregate::default();
        for e in q.range(start..) {
            if !query.admits(e) {
                continue;
            }
            if !having.iter().all(|(k, v)| e.variables.get(k) == Some(v)) {
                continue;
            }
            match e.variables.get(field).and_then(|v| v.trim().parse::<f64>().ok()) {
                Some(x) if x.is_finite() && x >= 0.0 => {
                    agg.sum += x;
                    agg.counted += 1;
                }
                _ => agg.skipped += 1,
            }
        }
        agg
    }

    /// Counts entries carrying `tag` inside the window, across all
    /// endpoints, grouped by source.
    pub fn count_by_tag(&self, tag: &str, query: &WindowQuery, group: GroupBy) -> BTreeMap<String, u64> {
        let inner = self.inner.read();
        let mut out = BTreeMap::new();
        let Some(q) = inner.by_tag.get(tag) else {
            return out;
        };
        let lower = query.lower_bound_ms();
        let start = q.partition_point(|e| (e.ts.0 as i128) <= lower);
        for e in q.range(start..) {
            if query.admits(e) {
                *out.entry(e.src.key(group).to_string()).or_insert(0) += 1;
            }
        }
        out
    }

    /// Writes every retained entry, one JSON object per line, ordered by
    /// sequence number.
    pub fn export_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let inner = self.inner.read();
        let mut all: Vec<&Arc<HistoryEntry>> = inner.per_key.values().flatten().collect();
        all.sort_by_key(|e| e.seq);
        for e in all {
            serde_json::to_writer(&mut out, e.as_ref())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuilds a store from an export. Sequence numbers are kept.
    pub fn import_jsonl(input: impl BufRead, retention: Retention) -> Result<Self, ContextError> {
        let store = Self::new(retention);
        let mut max_seq = 0;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: HistoryEntry = serde_json::from_str(&line).map_err(|err| ContextError::MalformedHistory {
                line: i + 1,
                reason: err.to_string(),
            })?;
            max_seq = max_seq.max(e.seq);
            store.append(e);
        }
        store.next_seq.store(max_seq + 1, Ordering::SeqCst);
        Ok(store)
    }
}
