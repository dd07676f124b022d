//! Request classification: prompt building, inference clients, completion
//! parsing and a rule-based oracle tagger.

mod client;
mod oracle;
mod output;
mod prompt;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http_model::ParsedRequest;
use crate::taxonomy::{Taxonomy, NONE};

pub use client::{
    CountingClient, HttpInferenceClient, InferenceClient, InferenceConfig, RecordingClient,
    SimulatedModelClient, TranscriptClient, TranscriptEntry, TranscriptError,
    DEFAULT_MAX_TOKENS,
};
pub use oracle::OracleTagger;
pub use output::{extract_class_numbers, parse_binary_output, parse_llm_output, ParsedOutput};
pub use prompt::{
    build_parallel_prompts, build_single_prompt, render_user_input, ClassBlock, PromptText,
    BINARY_NONE_CLASS, BINARY_TAG_CLASS, MAX_PROMPT_BODY_CHARS,
};

/// Default number of concurrent inference calls in parallel mode.
pub const DEFAULT_FANOUT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferenceError {
    #[error("inference endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("no recorded completion for prompt {0}")]
    TranscriptMiss(String),
    #[error("bad inference response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagSource {
    Oracle,
    Llm,
    Cache,
}

/// Tags assigned to one request. Never empty; `None` never appears together
/// with another tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TagSetRepr", into = "TagSetRepr")]
pub struct TagSet {
    tags: BTreeSet<String>,
    source: TagSource,
}

#[derive(Serialize, Deserialize)]
struct TagSetRepr {
    tags: Vec<String>,
    source: TagSource,
}

impl TryFrom<TagSetRepr> for TagSet {
    type Error = String;

    fn try_from(r: TagSetRepr) -> Result<Self, Self::Error> {
        if r.tags.is_empty() {
            return Err("tag set must not be empty".into());
        }
        if r.tags.len() > 1 && r.tags.iter().any(|t| t == NONE) {
            return Err("None cannot be combined with other tags".into());
        }
        Ok(TagSet::new(r.tags, r.source))
    }
}

impl From<TagSet> for TagSetRepr {
    fn from(t: TagSet) -> Self {
        TagSetRepr {
            tags: t.tags.into_iter().collect(),
            source: t.source,
        }
    }
}

impl TagSet {
    /// Normalises the given names: `None` is dropped when other tags are
    /// present and an empty input becomes `{None}`.
    pub fn new<I, S>(tags: I, source: TagSource) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tags: BTreeSet<String> = tags.into_iter().map(Into::into).collect();
        if tags.len() > 1 {
            tags.remove(NONE);
        }
        if tags.is_empty() {
            tags.insert(NONE.to_string());
        }
        Self { tags, source }
    }

    pub fn none(source: TagSource) -> Self {
        Self::new(std::iter::empty::<String>(), source)
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn is_none(&self) -> bool {
        self.tags.contains(NONE)
    }

    pub fn source(&self) -> TagSource {
        self.source
    }

    pub fn with_source(mut self, source: TagSource) -> Self {
        self.source = source;
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(String::as_str)
    }

    pub fn names(&self) -> Vec<&str> {
        self.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn same_tags(&self, other: &TagSet) -> bool {
        self.tags == other.tags
    }

    pub fn as_set(&self) -> &BTreeSet<String> {
        &self.tags
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Single,
    Parallel,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(PromptMode::Single),
            "parallel" => Ok(PromptMode::Parallel),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

/// Anything that can assign tags to a request.
pub trait Tagger: Send + Sync {
    fn tag(&self, r: &ParsedRequest, tx: &Taxonomy) -> Result<TagSet, InferenceError>;
}

impl<T: Tagger + ?Sized> Tagger for Arc<T> {
    fn tag(&self, r: &ParsedRequest, tx: &Taxonomy) -> Result<TagSet, InferenceError> {
        (**self).tag(r, tx)
    }
}

impl<T: Tagger + ?Sized> Tagger for Box<T> {
    fn tag(&self, r: &ParsedRequest, tx: &Taxonomy) -> Result<TagSet, InferenceError> {
        (**self).tag(r, tx)
    }
}

/// Classifies `r` with the model behind `client`.
///
/// Single mode sends one multi-class prompt. Parallel mode sends one binary
/// prompt per tag, at most `fanout` at a time, and unions the tags whose
/// prompt selected the tag class.
pub fn classify(
    r: &ParsedRequest,
    mode: PromptMode,
    client: &dyn InferenceClient,
    tx: &Taxonomy,
    fanout: usize,
) -> Result<ParsedOutput, InferenceError> {
    match mode {
        PromptMode::Single => {
            let prompt = build_single_prompt(r, tx);
            let text = client.complete(&prompt)?;
            Ok(parse_llm_output(&text, tx))
        }
        PromptMode::Parallel => {
            let prompts = build_parallel_prompts(r, tx);
            let answers = complete_all(&prompts, client, fanout.max(1))?;
            let mut warnings = Vec::new();
            let mut tags = Vec::new();
            for (prompt, text) in prompts.iter().zip(answers) {
                let tag = &prompt.class_blocks[0].tag;
                match parse_binary_output(&text, BINARY_TAG_CLASS) {
                    Some(true) => tags.push(tag.clone()),
                    Some(false) => {}
                    None => warnings.push(format!("{tag}: unparseable output {text:?}")),
                }
            }
            Ok(ParsedOutput {
                tags: TagSet::new(tags, TagSource::Llm),
                warning: (!warnings.is_empty()).then(|| warnings.join("; ")),
            })
        }
    }
}

fn complete_all(
    prompts: &[PromptText],
    client: &dyn InferenceClient,
    fanout: usize,
) -> Result<Vec<String>, InferenceError> {
    if fanout == 1 {
        return prompts.iter().map(|p| client.complete(p)).collect();
    }
    let mut out = Vec::with_capacity(prompts.len());
    for batch in prompts.chunks(fanout) {
        let results: Vec<Result<String, InferenceError>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|p| s.spawn(move || client.complete(p)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(InferenceError::Unavailable("inference worker panicked".into())))
                })
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Tagger backed by an inference client.
pub struct LlmTagger {
    client: Arc<dyn InferenceClient>,
    mode: PromptMode,
    fanout: usize,
    parse_warnings: AtomicU64,
}

impl LlmTagger {
    pub fn new(client: Arc<dyn InferenceClient>, mode: PromptMode) -> Self {
        Self {
            client,
            mode,
            fanout: DEFAULT_FANOUT,
            parse_warnings: AtomicU64::new(0),
        }
    }

    pub fn with_fanout(mut self, fanout: usize) -> Self {
        self.fanout = fanout.max(1);
        self
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn parse_warnings(&self) -> u64 {
        self.parse_warnings.load(Ordering::Relaxed)
    }
}

impl Tagger for LlmTagger {
    fn tag(&self, r: &ParsedRequest, tx: &Taxonomy) -> Result<TagSet, InferenceError> {
        let out = classify(r, self.mode, self.client.as_ref(), tx, self.fanout)?;
        if let Some(w) = &out.warning {
            self.parse_warnings.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(path = %r.path, "{w}");
        }
        Ok(out.tags)
    }
}
