use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{ContextError, Timestamp};

/// Interval between container snapshots.
pub const DEFAULT_SNAPSHOT_INTERVAL: Duration = Duration::from_secs(60);
pub const DEFAULT_CONTAINER_HORIZON: Duration = Duration::from_secs(3600);

/// Resource usage of one container at one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainerContext {
    pub ts: Timestamp,
    pub memory_bytes: u64,
    /// CPU usage as a fraction of one core (2.0 = two busy cores).
    pub cpu_cores: f64,
    pub io_bytes_per_sec: f64,
}

impl ContainerContext {
    fn validate(&self) -> Result<(), ContextError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.cpu_cores) && ok(self.io_bytes_per_sec) {
            Ok(())
        } else {
            Err(ContextError::InvalidSnapshot(format!("{self:?}")))
        }
    }
}

/// Snapshots per container id, kept for a bounded horizon.
pub struct ContainerStore {
    inner: RwLock<HashMap<String, VecDeque<ContainerContext>>>,
    horizon: Duration,
}

impl Default for ContainerStore {
    fn default() -> Self {
        Self::new(DEFAULT_CONTAINER_HORIZON)
    }
}

impl ContainerStore {
    pub fn new(horizon: Duration) -> Self {
        Self {
            inner: RwLock::new(HashMap::new()),
            horizon,
        }
    }

    pub fn record_container_snapshot(&self, id: &str, cc: ContainerContext) -> Result<(), ContextError> {
        cc.validate()?;
        let mut inner = self.inner.write();
        let q = inner.entry(id.to_string()).or_default();
        if q.back().is_some_and(|last| last.ts > cc.ts) {
            let pos = q.partition_point(|x| x.ts <= cc.ts);
            q.insert(pos, cc);
        } else {
            q.push_back(cc);
        }
        let newest = q.back().map(|c| c.ts.0).unwrap_or(cc.ts.0);
        let floor = newest.saturating_sub(self.horizon.as_millis() as u64);
        while q.len() > 1 && q.front().is_some_and(|c| c.ts.0 < floor) {
            q.pop_front();
        }
        Ok(())
    }

    pub fn latest_container_context(&self, id: &str) -> Result<ContainerContext, ContextError> {
        self.inner
            .read()
            .get(id)
            .and_then(|q| q.back().copied())
            .ok_or_else(|| ContextError::UnknownContainer(id.to_string()))
    }

    pub fn snapshots(&self, id: &str) -> Result<Vec<ContainerContext>, ContextError> {
        self.inner
            .read()
            .get(id)
            .map(|q| q.iter().copied().collect())
            .ok_or_else(|| ContextError::UnknownContainer(id.to_string()))
    }

    /// Pulls one round of samples from `provider` into the store.
    pub fn poll(&self, provider: &dyn MetricsProvider, now: Timestamp) -> Result<usize, ContextError> {
        let samples = provider.sample(now)?;
        let n = samples.len();
        for (id, cc) in samples {
            self.record_container_snapshot(&id, cc)?;
        }
        Ok(n)
    }
}

/// Source of container resource snapshots.
pub trait MetricsProvider: Send + Sync {
    fn sample(&self, now: Timestamp) -> Result<Vec<(String, ContainerContext)>, ContextError>;
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    ts: u64,
    container: String,
    m: u64,
    c: f64,
    i: f64,
}

/// Replays a metrics fixture (`ts,container,m,c,i` CSV rows). Each sample
/// returns, per container, the latest row not after `now`.
pub struct FileMetricsProvider {
    rows: HashMap<String, Vec<ContainerContext>>,
}

impl FileMetricsProvider {
    pub fn load(path: &Path) -> Result<Self, ContextError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ContextError::Metrics(e.to_string()))?;
        let mut rows: HashMap<String, Vec<ContainerContext>> = HashMap::new();
        for (i, rec) in rdr.deserialize::<MetricsRow>().enumerate() {
            let row = rec.map_err(|e| ContextError::Metrics(format!("row {}: {e}", i + 1)))?;
            rows.entry(row.container).or_default().push(ContainerContext {
                ts: Timestamp(row.ts),
                memory_bytes: row.m,
                cpu_cores: row.c,
                io_bytes_per_sec: row.i,
            });
        }
        for v in rows.values_mut() {
            v.sort_by_key(|c| c.ts);
        }
        Ok(Self { rows })
    }
}

impl MetricsProvider for FileMetricsProvider {
    fn sample(&self, now: Timestamp) -> Result<Vec<(String, ContainerContext)>, ContextError> {
        let mut out: Vec<(String, ContainerContext)> = self
            .rows
            .iter()
            .filter_map(|(id, rows)| {
                let idx = rows.partition_point(|c| c.ts <= now);
                idx.checked_sub(1).map(|i| (id.clone(), rows[i]))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}

/// Samples the current process from `/proc/self`, reporting it under a
/// fixed container id. CPU and IO are rates since the previous sample.
pub struct ProcessSampler {
    container_id: String,
    last: Mutex<Option<(Timestamp, u64, u64)>>,
}

impl ProcessSampler {
    pub fn new(container_id: impl Into<String>) -> Self {
        Self {
            container_id: container_id.into(),
            last: Mutex::new(None),
        }
    }

    fn read_proc() -> Result<(u64, u64, u64), ContextError> {
        let err = |e: std::io::Error| ContextError::Metrics(format!("/proc unavailable: {e}"));
        let statm = std::fs::read_to_string("/proc/self/statm").map_err(err)?;
        let rss_pages: u64 = statm
            .split_whitespace()
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ContextError::Metrics("bad /proc/self/statm".into()))?;
        let stat = std::fs::read_to_string("/proc/self/stat").map_err(err)?;
        // fields after the parenthesised command name; utime and stime are
        // the 14th and 15th fields overall
        let after = stat.rsplit_once(')').map(|(_, r)| r).unwrap_or("");
        let fields: Vec<&str> = after.split_whitespace().collect();
        let ticks = |i: usize| fields.get(i).and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
        let cpu_ticks = ticks(11) + ticks(12);
        let io = std::fs::read_to_string("/proc/self/io").unwrap_or_default();
        let io_bytes: u64 = io
            .lines()
            .filter_map(|l| {
                let (k, v) = l.split_once(':')?;
                matches!(k, "rchar" | "wchar").then(|| v.trim().parse::<u64>().ok())?
            })
            .sum();
        Ok((rss_pages * 4096, cpu_ticks, io_bytes))
    }
}

const CLOCK_TICKS_PER_SEC: f64 = 100.0;

impl MetricsProvider for ProcessSampler {
    fn sample(&self, now: Timestamp) -> Result<Vec<(String, ContainerContext)>, ContextError> {
        let (mem, cpu_ticks, io_bytes) = Self::read_proc()?;
        let mut last = self.last.lock();
        let (cpu, io) = match *last {
            Some((ts, prev_cpu, prev_io)) if now.0 > ts.0 => {
                let secs = (now.0 - ts.0) as f64 / 1000.0;
                (
                    cpu_ticks.saturating_sub(prev_cpu) as f64 / CLOCK_TICKS_PER_SEC / secs,
                    io_bytes.saturating_sub(prev_io) as f64 / secs,
                )
            }
            _ => (0.0, 0.0),
        };
        *last = Some((now, cpu_ticks, io_bytes));
        Ok(vec![(
            self.container_id.clone(),
            ContainerContext {
                ts: now,
                memory_bytes: mem,
                cpu_cores: cpu,
                io_bytes_per_sec: io,
            },
        )])
    }
}
