//! Main configuration file (TOML). Every section and key is optional.
//!
//! ```toml
//! taxonomy = "data/taxonomy.toml"
//! synonyms = "data/synonyms.toml"
//!
//! [proxy]
//! listen = "127.0.0.1:8080"
//! upstream = "127.0.0.1:9000"
//! tagger = "transcript"
//! transcript = "fixtures/transcript_single.jsonl"
//!
//! [policy]
//! record_threshold = 100
//! purchase_window = "5m"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::audit_log::{Sampling, DEFAULT_QUEUE_CAPACITY};
use crate::context::Retention;
use crate::http_model::DEFAULT_MAX_BODY;
use crate::policy::{ConfigError, PolicyConfig};
use crate::tag_cache::DEFAULT_CACHE_CAPACITY;
use crate::tag_params::{default_synonyms, SynonymError, SynonymTable};
use crate::tagging::{InferenceConfig, PromptMode};
use crate::taxonomy::{default_taxonomy, Taxonomy, TaxonomyError};

#[derive(Debug, thiserror::Error)]
pub enum AppConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Policy(#[from] ConfigError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Synonyms(#[from] SynonymError),
    #[error("{0}")]
    Invalid(String),
}

/// Where tags come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    /// A model served over HTTP.
    Llm,
    /// The rule-based oracle.
    #[default]
    Oracle,
    /// Recorded model answers.
    Transcript,
}

impl FromStr for TaggerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(TaggerKind::Llm),
            "oracle" => Ok(TaggerKind::Oracle),
            "transcript" => Ok(TaggerKind::Transcript),
            other => Err(format!("unknown tagger {other:?} (expected llm, oracle or transcript)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySection {
    pub listen: SocketAddr,
    pub upstream: SocketAddr,
    pub mode: PromptMode,
    pub tagger: TaggerKind,
    pub transcript: Option<PathBuf>,
    pub max_body: usize,
    #[serde(with = "humantime_serde")]
    pub upstream_timeout: Duration,
    #[serde(with = "humantime_serde")]
    pub shutdown_grace: Duration,
    /// Container id reported for the upstream.
    pub container: Option<String>,
    /// Metrics fixture (`ts,container,m,c,i` rows); without it the proxy
    /// samples its own process.
    pub metrics: Option<PathBuf>,
}

impl Default for ProxySection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("static addr"),
            upstream: "127.0.0.1:9000".parse().expect("static addr"),
            mode: PromptMode::Single,
            tagger: TaggerKind::Oracle,
            transcript: None,
            max_body: DEFAULT_MAX_BODY,
            upstream_timeout: Duration::from_secs(30),
            shutdown_grace: Duration::from_secs(10),
            container: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub enabled: bool,
    pub capacity: usize,
    pub preload: Option<PathBuf>,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: DEFAULT_CACHE_CAPACITY,
            preload: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistorySection {
    #[serde(with = "humantime_serde")]
    pub max_age: Duration,
    pub max_entries_per_key: usize,
    pub max_entries_per_tag: usize,
}

impl Default for HistorySection {
    fn default() -> Self {
        let r = Retention::default();
        Self {
            max_age: r.max_age,
            max_entries_per_key: r.max_entries_per_key,
            max_entries_per_tag: r.max_entries_per_tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// JSON-lines log file. Without it records go to stderr.
    pub path: Option<PathBuf>,
    pub queue_capacity: usize,
    /// Write one Allow record in N; 0 or 1 writes all.
    pub sample_allow_one_in: u64,
}

impl Default for LogSection {
    fn default() -> Self {
        Self {
            path: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            sample_allow_one_in: 0,
        }
    }
}

impl LogSection {
    pub fn sampling(&self) -> Sampling {
        Sampling {
            allow_one_in: self.sample_allow_one_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub taxonomy: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub proxy: ProxySection,
    pub inference: InferenceConfig,
    pub cache: CacheSection,
    pub history: HistorySection,
    pub policy: PolicyConfig,
    pub log: LogSection,
}

impl AppConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, AppConfigError> {
        let cfg: AppConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`. Relative paths inside the file are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, AppConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| AppConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.taxonomy);
        fix(&mut self.synonyms);
        fix(&mut self.proxy.transcript);
        fix(&mut self.proxy.metrics);
        fix(&mut self.cache.preload);
        fix(&mut self.log.path);
    }

    /// History retention, protecting every configured policy window from
    /// count-based eviction.
    pub fn retention(&self) -> Retention {
        Retention {
            max_age: self.history.max_age,
            max_entries_per_key: self.history.max_entries_per_key,
            max_entries_per_tag: self.history.max_entries_per_tag,
            protected_window: self.policy.largest_window(),
        }
    }

    pub fn validate(&self) -> Result<(), AppConfigError> {
        self.policy.validate(&self.retention())?;
        if self.cache.capacity == 0 {
            return Err(AppConfigError::Invalid("cache.capacity must be greater than zero".into()));
        }
        if self.log.queue_capacity == 0 {
            return Err(AppConfigError::Invalid("log.queue_capacity must be greater than zero".into()));
        }
        if self.proxy.tagger == TaggerKind::Transcript && self.proxy.transcript.is_none() {
            return Err(AppConfigError::Invalid("proxy.tagger = \"transcript\" needs proxy.transcript".into()));
        }
        Ok(())
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy, AppConfigError> {
        match &self.taxonomy {
            Some(p) => Ok(Taxonomy::load(p)?),
            None => Ok(default_taxonomy()),
        }
    }

    pub fn load_synonyms(&self) -> Result<SynonymTable, AppConfigError> {
        match &self.synonyms {
            Some(p) => Ok(SynonymTable::load(p)?),
            None => Ok(default_synonyms()),
        }
    }
}
