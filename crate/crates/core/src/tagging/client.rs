use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http_model::parse_request;

use super::oracle::OracleTagger;
use super::prompt::{PromptText, BINARY_NONE_CLASS, BINARY_TAG_CLASS};
use super::InferenceError;

pub const DEFAULT_MAX_TOKENS: u32 = 20;

/// A completion backend. Implementations must tolerate concurrent calls.
pub trait InferenceClient: Send + Sync {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError>;
}

impl<C: InferenceClient + ?Sized> InferenceClient for std::sync::Arc<C> {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8081/v1/completions".into(),
            model: "llama-2-70b-chat".into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Posts `{"model", "prompt", "max_tokens"}` as JSON to the configured
/// endpoint and reads the generated `text` field of the reply.
pub struct HttpInferenceClient {
    config: InferenceConfig,
    agent: ureq::Agent,
}

impl HttpInferenceClient {
    pub fn new(config: InferenceConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }
}

impl InferenceClient for HttpInferenceClient {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        let rendered = prompt.render();
        let body = CompletionRequest {
            model: &self.config.model,
            prompt: &rendered,
            max_tokens: self.config.max_tokens,
        };
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(&body)
            .map_err(|e| InferenceError::Unavailable(e.to_string()))?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        Ok(parsed.text)
    }
}

/// Wraps a client and counts calls.
pub struct CountingClient<C> {
    inner: C,
    calls: AtomicU64,
}

impl<C> CountingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: InferenceClient> InferenceClient for CountingClient<C> {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt)
    }
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub output: String,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("cannot read transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("transcript line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Replays recorded completions keyed by prompt fingerprint.
#[derive(Debug, Clone, Default)]
pub struct TranscriptClient {
    outputs: HashMap<String, String>,
    latency: Option<Duration>,
}

impl TranscriptClient {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        Self {
            outputs: entries.into_iter().map(|e| (e.prompt_hash, e.output)).collect(),
            latency: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(&line).map_err(|e| TranscriptError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    /// Sleeps for `latency` on every call, modelling a remote model.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn contains(&self, prompt: &PromptText) -> bool {
        self.outputs.contains_key(&prompt.fingerprint())
    }
}

impl InferenceClient for TranscriptClient {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let hash = prompt.fingerprint();
        self.outputs
            .get(&hash)
            .cloned()
            .ok_or(InferenceError::TranscriptMiss(hash))
    }
}

/// Records every completion of the wrapped client so it can be written out
/// as a transcript.
pub struct RecordingClient<C> {
    inner: C,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<C> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.recorded
            .lock()
            .iter()
            .map(|(h, o)| TranscriptEntry {
                prompt_hash: h.clone(),
                output: o.clone(),
            })
            .collect()
    }

    /// Writes the transcript sorted by prompt hash.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in self.entries() {
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<C: InferenceClient> InferenceClient for RecordingClient<C> {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        let out = self.inner.complete(prompt)?;
        self.recorded.lock().insert(prompt.fingerprint(), out.clone());
        Ok(out)
    }
}

/// Model stand-in that reads the request back out of the prompt and answers
/// with the oracle tagger's verdict in the requested output format.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedModelClient;

impl SimulatedModelClient {
    pub fn new() -> Self {
        Self
    }
}

impl InferenceClient for SimulatedModelClient {
    fn complete(&self, prompt: &PromptText) -> Result<String, InferenceError> {
        let peer = IpAddr::V4(Ipv4Addr::LOCALHOST);
        let request = parse_request(prompt.user_input.as_bytes(), peer)
            .map_err(|e| InferenceError::BadResponse(format!("simulated model cannot read request: {e}")))?;
        let truth = OracleTagger.rule_tags(&request);
        let is_binary = prompt.class_blocks.len() == 2
            && prompt.class_blocks[0].id == BINARY_TAG_CLASS
            && prompt.class_blocks[1].id == BINARY_NONE_CLASS;
        if is_binary {
            let hit = truth.contains(&prompt.class_blocks[0].tag.as_str());
            let id = if hit { BINARY_TAG_CLASS } else { BINARY_NONE_CLASS };
            return Ok(format!("classes: [{id}]"));
        }
        let mut ids: Vec<u16> = prompt
            .class_blocks
            .iter()
            .filter(|b| truth.contains(&b.tag.as_str()))
            .map(|b| b.id)
            .collect();
        if ids.is_empty() {
            ids.extend(prompt.none_class());
        }
        let list: Vec<String> = ids.iter().map(u16::to_string).collect();
        Ok(format!("classes: [{}]", list.join(", ")))
    }
}
