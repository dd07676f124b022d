//! Builds taggers, pipelines and proxy state from an [`AppConfig`].

use std::fs::OpenOptions;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _};

use flowtag_core::audit_log::AuditLog;
use flowtag_core::config::{AppConfig, TaggerKind};
use flowtag_core::context::{
    Clock, ContainerStore, FileMetricsProvider, HistoryStore, MetricsProvider, MonotonicClock, ProcessSampler,
    DEFAULT_CONTAINER_HORIZON, DEFAULT_SNAPSHOT_INTERVAL,
};
use flowtag_core::pipeline::Pipeline;
use flowtag_core::tag_cache::TagCache;
use flowtag_core::tagging::{
    CountingClient, HttpInferenceClient, InferenceClient, InferenceConfig, LlmTagger, OracleTagger, PromptMode,
    Tagger, TranscriptClient,
};

use crate::server::ProxyState;

pub type SharedClient = Arc<CountingClient<Arc<dyn InferenceClient>>>;

/// A tagger plus, for model-backed taggers, the call counter around its
/// client.
pub struct BuiltTagger {
    pub tagger: Arc<dyn Tagger>,
    pub client: Option<SharedClient>,
}

pub fn build_tagger(
    kind: TaggerKind,
    mode: PromptMode,
    transcript: Option<&Path>,
    inference: &InferenceConfig,
) -> anyhow::Result<BuiltTagger> {
    let client: Arc<dyn InferenceClient> = match kind {
        TaggerKind::Oracle => {
            return Ok(BuiltTagger {
                tagger: Arc::new(OracleTagger),
                client: None,
            })
        }
        TaggerKind::Transcript => {
            let Some(path) = transcript else {
                bail!("the transcript tagger needs a transcript file");
            };
            let t = TranscriptClient::load(path).with_context(|| format!("loading {}", path.display()))?;
            Arc::new(t)
        }
        TaggerKind::Llm => Arc::new(HttpInferenceClient::new(inference.clone())),
    };
    Ok(from_client(client, mode))
}

pub fn from_client(client: Arc<dyn InferenceClient>, mode: PromptMode) -> BuiltTagger {
    let counting = Arc::new(CountingClient::new(client));
    let as_client: Arc<dyn InferenceClient> = counting.clone();
    BuiltTagger {
        tagger: Arc::new(LlmTagger::new(as_client, mode)),
        client: Some(counting),
    }
}

/// Builds the pipeline described by `cfg`, including the cache preload and
/// the container metrics poller.
pub fn build_pipeline(cfg: &AppConfig) -> anyhow::Result<(Pipeline, Option<SharedClient>)> {
    cfg.validate()?;
    let taxonomy = Arc::new(cfg.load_taxonomy()?);
    let synonyms = Arc::new(cfg.load_synonyms()?);
    let built = build_tagger(
        cfg.proxy.tagger,
        cfg.proxy.mode,
        cfg.proxy.transcript.as_deref(),
        &cfg.inference,
    )?;
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::default());

    let cache = if cfg.cache.enabled {
        let cache = TagCache::new(cfg.cache.capacity);
        if let Some(p) = &cfg.cache.preload {
            let n = cache
                .preload(p, clock.now())
                .with_context(|| format!("preloading {}", p.display()))?;
            tracing::info!("preloaded {n} cache entries from {}", p.display());
        }
        Some(Arc::new(cache))
    } else {
        None
    };

    let mut pipeline = Pipeline::new(taxonomy, synonyms, built.tagger)
        .with_cache(cache)
        .with_history(Arc::new(HistoryStore::new(cfg.retention())))
        .with_config(cfg.policy.clone())
        .with_clock(clock.clone());

    if let Some(id) = &cfg.proxy.container {
        let store = Arc::new(ContainerStore::new(DEFAULT_CONTAINER_HORIZON));
        let provider: Box<dyn MetricsProvider> = match &cfg.proxy.metrics {
            Some(p) => Box::new(FileMetricsProvider::load(p).with_context(|| format!("loading {}", p.display()))?),
            None => Box::new(ProcessSampler::new(id.clone())),
        };
        start_metrics_poller(store.clone(), provider, clock, DEFAULT_SNAPSHOT_INTERVAL);
        pipeline = pipeline.with_containers(store, Some(id.clone()));
    }
    Ok((pipeline, built.client))
}

/// Samples `provider` into `store` now and then every `every`, on a
/// detached thread.
pub fn start_metrics_poller(
    store: Arc<ContainerStore>,
    provider: Box<dyn MetricsProvider>,
    clock: Arc<dyn Clock>,
    every: Duration,
) {
    std::thread::Builder::new()
        .name("metrics-poller".into())
        .spawn(move || loop {
            if let Err(e) = store.poll(provider.as_ref(), clock.now()) {
                tracing::warn!("container metrics: {e}");
            }
            std::thread::sleep(every);
        })
        .expect("spawn metrics poller");
}

/// Proxy state for `cfg`, with the audit log opened if one is configured.
pub fn build_state(cfg: &AppConfig) -> anyhow::Result<ProxyState> {
    let (pipeline, _) = build_pipeline(cfg)?;
    let mut state = ProxyState::new(Some(Arc::new(pipeline)), cfg.proxy.upstream)
        .with_max_body(cfg.proxy.max_body)
        .with_upstream_timeout(cfg.proxy.upstream_timeout);
    if let Some(p) = &cfg.log.path {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .with_context(|| format!("opening log {}", p.display()))?;
        state = state.with_log(Arc::new(AuditLog::start(
            Box::new(f),
            cfg.log.queue_capacity,
            cfg.log.sampling(),
        )));
    }
    Ok(state)
}
