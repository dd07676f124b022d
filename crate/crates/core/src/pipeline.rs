//! Request pipeline: key, cache lookup or classification, parameter
//! extraction, history recording, policy evaluation.

use std::sync::Arc;
use std::time::Instant;

use crate::audit_log::LogRecord;
use crate::context::{
    Clock, ContainerStore, DestinationAttributes, HistoryStore, MonotonicClock, RequestContext, Timestamp,
};
use crate::http_model::{extract_source_attributes, request_key, CacheKey, ParsedRequest};
use crate::policy::{Decision, FailMode, PolicyChain, PolicyConfig, Reason};
use crate::tag_cache::{TagCache, TagCacheEntry};
use crate::tag_params::{extract_tag_params, extract_with_cached_names, SynonymTable, TagDetail};
use crate::tagging::{InferenceError, TagSet, TagSource, Tagger};
use crate::taxonomy::Taxonomy;

/// Reason attached when tags could not be obtained.
pub const INFERENCE_UNAVAILABLE: &str = "InferenceUnavailable";

/// How the tags of a request were obtained.
#[derive(Debug, Clone)]
pub enum Tagging {
    Hit(TagCacheEntry),
    Classified(TagSet),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub ts: Timestamp,
    pub key: CacheKey,
    pub decision: Decision,
    pub detail: TagDetail,
    pub entry_seq: Option<u64>,
    pub elapsed_us: u64,
}

impl PipelineOutcome {
    pub fn log_record(&self, trace_id: &str, client_ip: &str) -> LogRecord {
        LogRecord {
            ts: self.ts,
            trace_id: trace_id.to_string(),
            key: self.key.clone(),
            client_ip: client_ip.to_string(),
            tags: self.detail.tags.iter().map(str::to_string).collect(),
            tag_source: self.detail.tags.source(),
            param_names: self.detail.param_names.clone(),
            outcome: self.decision.outcome,
            deciding_policy: self.decision.deciding_policy.clone(),
            reasons: self.decision.reasons.clone(),
            pipeline_us: self.elapsed_us,
            total_us: None,
            upstream_status: None,
        }
    }
}

/// Shared pipeline state. All stages are reentrant.
pub struct Pipeline {
    pub taxonomy: Arc<Taxonomy>,
    pub synonyms: Arc<SynonymTable>,
    pub tagger: Arc<dyn Tagger>,
    /// `None` disables caching: every request is classified.
    pub cache: Option<Arc<TagCache>>,
    pub history: Arc<HistoryStore>,
    pub containers: Option<Arc<ContainerStore>>,
    /// Container that serves the upstream, if known.
    pub container_id: Option<String>,
    pub chain: PolicyChain,
    pub config: PolicyConfig,
    pub clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn new(taxonomy: Arc<Taxonomy>, synonyms: Arc<SynonymTable>, tagger: Arc<dyn Tagger>) -> Self {
        Self {
            taxonomy,
            synonyms,
            tagger,
            cache: Some(Arc::new(TagCache::default())),
            history: Arc::new(HistoryStore::default()),
            containers: None,
            container_id: None,
            chain: PolicyChain::builtin(),
            config: PolicyConfig::default(),
            clock: Arc::new(MonotonicClock::default()),
        }
    }

    pub fn with_cache(mut self, cache: Option<Arc<TagCache>>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_history(mut self, history: Arc<HistoryStore>) -> Self {
        self.history = history;
        self
    }

    pub fn with_chain(mut self, chain: PolicyChain) -> Self {
        self.chain = chain;
        self
    }

    pub fn with_config(mut self, config: PolicyConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_containers(mut self, store: Arc<ContainerStore>, id: Option<String>) -> Self {
        self.containers = Some(store);
        self.container_id = id;
        self
    }

    /// Cache lookup only. Cheap; safe on an async executor.
    pub fn lookup(&self, key: &CacheKey) -> Option<TagCacheEntry> {
        self.cache.as_ref()?.get(key)
    }

    /// Classifies `r`. May block on the inference backend.
    pub fn classify(&self, r: &ParsedRequest) -> Tagging {
        match self.tagger.tag(r, &self.taxonomy) {
            Ok(tags) => Tagging::Classified(tags),
            Err(e) => Tagging::Failed(describe(&e)),
        }
    }

    /// Full pipeline, blocking on inference when the cache misses.
    pub fn process(&self, r: &ParsedRequest) -> PipelineOutcome {
        let ts = self.clock.now();
        self.process_at(r, ts)
    }

    /// Same as [`Pipeline::process`] with an explicit receipt time.
    pub fn process_at(&self, r: &ParsedRequest, ts: Timestamp) -> PipelineOutcome {
        let start = Instant::now();
        let key = request_key(r);
        let tagging = match self.lookup(&key) {
            Some(hit) => Tagging::Hit(hit),
            None => self.classify(r),
        };
        self.finish(r, key, tagging, ts, start)
    }

    /// Stages after tagging: extraction, cache fill, recording, evaluation.
    pub fn finish(
        &self,
        r: &ParsedRequest,
        key: CacheKey,
        tagging: Tagging,
        ts: Timestamp,
        start: Instant,
    ) -> PipelineOutcome {
        let mut failure = None;
        let detail = match tagging {
            Tagging::Hit(entry) => {
                extract_with_cached_names(&entry.tags, r, &entry.param_names, &self.synonyms, &self.taxonomy)
            }
            Tagging::Classified(tags) => {
                let detail = extract_tag_params(&tags, r, &self.synonyms, &self.taxonomy);
                if let Some(cache) = &self.cache {
                    cache.put(
                        key.clone(),
                        TagCacheEntry {
                            tags: tags.clone(),
                            param_names: detail.param_names.clone(),
                            created_ts: ts,
                        },
                    );
                }
                detail
            }
            Tagging::Failed(msg) => {
                failure = Some(msg);
                extract_tag_params(&TagSet::none(TagSource::Llm), r, &self.synonyms, &self.taxonomy)
            }
        };

        let src = extract_source_attributes(r);
        let dest = DestinationAttributes::from_request(r, self.container_id.clone());
        // recorded before evaluation so that denied attempts count too; the
        // entry's own seq is excluded from its windows
        let entry = self.history.record_request(&key, ts, &src, &detail);

        let decision = match failure {
            Some(msg) => match self.config.fail_mode {
                FailMode::Open => {
                    let mut d = self.evaluate(&detail, &key, ts, &src, &dest, Some(entry.seq));
                    d.reasons.insert(0, Reason::new(INFERENCE_UNAVAILABLE, msg));
                    if d.outcome == crate::policy::Outcome::Allow {
                        d.outcome = crate::policy::Outcome::Audit;
                    }
                    d
                }
                FailMode::Closed => Decision::deny(INFERENCE_UNAVAILABLE, msg),
            },
            None => self.evaluate(&detail, &key, ts, &src, &dest, Some(entry.seq)),
        };

        PipelineOutcome {
            ts,
            key,
            decision,
            detail,
            entry_seq: Some(entry.seq),
            elapsed_us: start.elapsed().as_micros() as u64,
        }
    }

    fn evaluate(
        &self,
        detail: &TagDetail,
        key: &CacheKey,
        ts: Timestamp,
        src: &crate::http_model::SourceAttributes,
        dest: &DestinationAttributes,
        entry_seq: Option<u64>,
    ) -> Decision {
        let cc = match (&self.containers, &self.container_id) {
            (Some(store), Some(id)) => store.latest_container_context(id).ok(),
            _ => None,
        };
        let ctx = RequestContext {
            ts,
            src,
            dest,
            key,
            entry_seq,
            hist: &self.history,
            containers: self.containers.as_deref(),
            group_by: self.config.group_by,
        };
        self.chain.evaluate(detail, &ctx, cc.as_ref(), &self.config)
    }
}

fn describe(e: &InferenceError) -> String {
    e.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ManualClock;
    use crate::http_model::parse_request;
    use crate::policy::{Outcome, PURCHASE_LIMIT};
    use crate::tag_params::default_synonyms;
    use crate::tagging::{CountingClient, LlmTagger, OracleTagger, PromptMode, SimulatedModelClient};
    use crate::taxonomy::default_taxonomy;

    fn req(raw: &str) -> ParsedRequest {
        parse_request(raw.as_bytes(), "10.0.0.1".parse().unwrap()).unwrap()
    }

    fn llm_pipeline(mode: PromptMode) -> (Pipeline, Arc<CountingClient<SimulatedModelClient>>) {
        let client = Arc::new(CountingClient::new(SimulatedModelClient::new()));
        let tagger = LlmTagger::new(client.clone(), mode);
        let p = Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), Arc::new(tagger))
            .with_clock(Arc::new(ManualClock::new(Timestamp(1_000_000))));
        (p, client)
    }

    #[test]
    fn second_request_hits_cache() {
        let (p, client) = llm_pipeline(PromptMode::Single);
        let a = p.process(&req("GET /feed/list?count=10 HTTP/1.1\r\nHost: x\r\n\r\n"));
        assert_eq!(client.calls(), 1);
        let b = p.process(&req("GET /feed/list?count=20 HTTP/1.1\r\nHost: x\r\n\r\n"));
        assert_eq!(client.calls(), 1);
        assert_eq!(a.detail.tags.source(), TagSource::Llm);
        assert_eq!(b.detail.tags.source(), TagSource::Cache);
        // values always come from the current request
        assert_eq!(b.detail.variable("num_records"), Some("20"));
    }

    #[test]
    fn parallel_mode_calls_once_per_tag() {
        let (p, client) = llm_pipeline(PromptMode::Parallel);
        p.process(&req("GET /items?limit=5 HTTP/1.1\r\nHost: x\r\n\r\n"));
        assert_eq!(client.calls(), 9);
        p.process(&req("GET /items?limit=6 HTTP/1.1\r\nHost: x\r\n\r\n"));
        assert_eq!(client.calls(), 9);
    }

    #[test]
    fn no_cache_classifies_every_time() {
        let (p, client) = llm_pipeline(PromptMode::Single);
        let p = p.with_cache(None);
        for _ in 0..3 {
            p.process(&req("GET /items?limit=5 HTTP/1.1\r\nHost: x\r\n\r\n"));
        }
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn denied_requests_are_recorded() {
        let p = Pipeline::new(
            Arc::new(default_taxonomy()),
            Arc::new(default_synonyms()),
            Arc::new(OracleTagger),
        );
        let raw = "POST /checkout HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: 31\r\n\r\n{\"product_id\":\"A1\",\"qty\":\"20\"}\n";
        let out = p.process(&req(raw));
        assert_eq!(out.decision.deciding_policy.as_deref(), Some(PURCHASE_LIMIT));
        assert_eq!(p.history.len(&out.key), 1);
    }

    struct Down;

    impl Tagger for Down {
        fn tag(&self, _: &ParsedRequest, _: &Taxonomy) -> Result<TagSet, InferenceError> {
            Err(InferenceError::Unavailable("connection refused".into()))
        }
    }

    #[test]
    fn inference_outage_fail_open_and_closed() {
        let p = Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), Arc::new(Down));
        let r = req("GET /items?limit=5 HTTP/1.1\r\nHost: x\r\n\r\n");
        let open = p.process(&r);
        assert_eq!(open.decision.outcome, Outcome::Audit);
        assert_eq!(open.decision.reasons[0].policy, INFERENCE_UNAVAILABLE);
        // failures are not cached
        assert!(p.lookup(&open.key).is_none());

        let p = p.with_config(PolicyConfig {
            fail_mode: FailMode::Closed,
            ..PolicyConfig::default()
        });
        let closed = p.process(&r);
        assert_eq!(closed.decision.deciding_policy.as_deref(), Some(INFERENCE_UNAVAILABLE));
    }

    #[test]
    fn log_record_has_no_values() {
        let p = Pipeline::new(
            Arc::new(default_taxonomy()),
            Arc::new(default_synonyms()),
            Arc::new(OracleTagger),
        );
        let out = p.process(&req("POST /login HTTP/1.1\r\nHost: x\r\nContent-Type: application/x-www-form-urlencoded\r\nContent-Length: 32\r\n\r\nusername=alice&password=hunter22"));
        let line = serde_json::to_string(&out.log_record("t", "10.0.0.1")).unwrap();
        assert!(line.contains("\"username\""));
        assert!(!line.contains("alice"));
        assert!(!line.contains("hunter22"));
    }
}
