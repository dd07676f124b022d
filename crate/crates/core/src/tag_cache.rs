//! Per-endpoint cache of tag assignments and resolved parameter names.
//! Parameter values are never cached.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::Timestamp;
use crate::http_model::CacheKey;
use crate::tagging::{TagSet, TagSource};

pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagCacheEntry {
    pub tags: TagSet,
    /// Policy variable -> request parameter name.
    pub param_names: BTreeMap<String, String>,
    pub created_ts: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("malformed preload file at line {line}: {reason}")]
    MalformedPreloadFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a preload file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreloadRecord {
    pub method: String,
    pub path: String,
    pub tags: Vec<String>,
    #[serde(default)]
    pub param_names: BTreeMap<String, String>,
}

struct Slot {
    entry: TagCacheEntry,
    tick: u64,
}

#[derive(Default)]
struct Lru {
    map: HashMap<CacheKey, Slot>,
    // recency order: tick -> key
    order: BTreeMap<u64, CacheKey>,
    tick: u64,
}

impl Lru {
    fn touch(&mut self, key: &CacheKey) -> Option<&Slot> {
        self.tick += 1;
        let tick = self.tick;
        let slot = self.map.get_mut(key)?;
        self.order.remove(&slot.tick);
        slot.tick = tick;
        self.order.insert(tick, key.clone());
        Some(slot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

/// Thread-safe LRU keyed by `(method, normalised path)`.
pub struct TagCache {
    inner: Mutex<Lru>,
    capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl Default for TagCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl TagCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(Lru::default()),
            capacity: capacity.max(1),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Returns the entry for `key`, with its tags marked as coming from the
    /// cache.
    pub fn get(&self, key: &CacheKey) -> Option<TagCacheEntry> {
        let mut lru = self.inner.lock();
        match lru.touch(key) {
            Some(slot) => {
                let mut e = slot.entry.clone();
                e.tags = e.tags.with_source(TagSource::Cache);
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(e)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn put(&self, key: CacheKey, entry: TagCacheEntry) {
        let mut lru = self.inner.lock();
        lru.tick += 1;
        let tick = lru.tick;
        if let Some(old) = lru.map.insert(key.clone(), Slot { entry, tick }) {
            lru.order.remove(&old.tick);
        }
        lru.order.insert(tick, key);
        while lru.map.len() > self.capacity {
            let Some((_, oldest)) = lru.order.pop_first() else { break };
            lru.map.remove(&oldest);
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn invalidate(&self, key: &CacheKey) -> bool {
        let mut lru = self.inner.lock();
        match lru.map.remove(key) {
            Some(slot) => {
                lru.order.remove(&slot.tick);
                true
            }
            None => false,
        }
    }

    pub fn clear(&self) {
        *self.inner.lock() = Lru::default();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    /// Loads preload records. Nothing is inserted if any line is malformed.
    pub fn preload_from(&self, input: impl BufRead, now: Timestamp) -> Result<usize, CacheError> {
        let mut staged = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PreloadRecord = serde_json::from_str(&line).map_err(|e| CacheError::MalformedPreloadFile {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if rec.method.is_empty() || !rec.path.starts_with('/') {
                return Err(CacheError::MalformedPreloadFile {
                    line: i + 1,
                    reason: "method must be set and path must start with '/'".into(),
                });
            }
            staged.push(rec);
        }
        let n = staged.len();
        for rec in staged {
            self.put(
                CacheKey::new(&rec.method, &rec.path),
                TagCacheEntry {
                    tags: TagSet::new(rec.tags, TagSource::Llm),
                    param_names: rec.param_names,
                    created_ts: now,
                },
            );
        }
        Ok(n)
    }

    pub fn preload(&self, path: &Path, now: Timestamp) -> Result<usize, CacheError> {
        let f = std::fs::File::open(path)?;
        self.preload_from(std::io::BufReader::new(f), now)
    }

    /// Writes the current entries in preload format, least recent first.
    pub fn export(&self, mut out: impl Write) -> std::io::Result<()> {
        let lru = self.inner.lock();
        for key in lru.order.values() {
            let slot = &lru.map[key];
            let rec = PreloadRecord {
                method: key.method.clone(),
                path: key.path.clone(),
                tags: slot.entry.tags.iter().map(str::to_string).collect(),
                param_names: slot.entry.param_names.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
