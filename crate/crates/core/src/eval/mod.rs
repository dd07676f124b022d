//! Offline evaluation: labelled corpora, tagging accuracy, tag popularity
//! and cache preload generation.

mod metrics;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit_log::LogRecord;
use crate::http_model::{request_key, CacheKey, ParsedRequest, RequestParser};
use crate::tag_cache::PreloadRecord;
use crate::tag_params::{extract_tag_params, SynonymTable};
use crate::tagging::{InferenceError, TagSet, TagSource, Tagger};
use crate::taxonomy::Taxonomy;

pub use metrics::{score_predictions, EvalReport, LatencyStats, TagCounts, TagMetrics};

const CORPUS_PEER: IpAddr = IpAddr::V4(Ipv4Addr::new(192, 0, 2, 1));

/// One labelled request.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRequest {
    pub raw: String,
    pub request: ParsedRequest,
    pub ground_truth: TagSet,
    pub expected_variables: Option<BTreeMap<String, String>>,
    pub app: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct CorpusLine {
    raw: String,
    tags: Vec<String>,
    #[serde(default)]
    variables: Option<BTreeMap<String, String>>,
    #[serde(default)]
    app: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus not found: {0}")]
    CorpusNotFound(PathBuf),
    #[error("malformed corpus record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Records plus the lines that were skipped in lenient mode.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<LabeledRequest>,
    /// (line number, reason).
    pub skipped: Vec<(usize, String)>,
}

fn parse_line(line: &str, parser: &RequestParser) -> Result<LabeledRequest, String> {
    let l: CorpusLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if l.tags.is_empty() {
        return Err("tags must not be empty (use [\"None\"])".into());
    }
    if l.tags.len() > 1 && l.tags.iter().any(|t| t == crate::taxonomy::NONE) {
        return Err("None cannot be combined with other tags".into());
    }
    let request = parser
        .parse(l.raw.as_bytes(), CORPUS_PEER)
        .map_err(|e| format!("raw request: {e}"))?;
    Ok(LabeledRequest {
        raw: l.raw,
        request,
        ground_truth: TagSet::new(l.tags, TagSource::Oracle),
        expected_variables: l.variables,
        app: l.app,
    })
}

/// Reads a corpus. In strict mode the first bad line aborts; otherwise bad
/// lines are reported in [`Corpus::skipped`].
pub fn read_corpus(input: impl BufRead, strict: bool) -> Result<Corpus, CorpusError> {
    let parser = RequestParser::default();
    let mut corpus = Corpus::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &parser) {
            Ok(r) => corpus.records.push(r),
            Err(reason) if strict => return Err(CorpusError::MalformedRecord { line: i + 1, reason }),
            Err(reason) => {
                tracing::warn!(line = i + 1, "skipping corpus record: {reason}");
                corpus.skipped.push((i + 1, reason));
            }
        }
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path, strict: bool) -> Result<Corpus, CorpusError> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::CorpusNotFound(path.to_path_buf()),
        _ => CorpusError::Io(e),
    })?;
    read_corpus(std::io::BufReader::new(f), strict)
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Abort on the first tagger failure instead of scoring it as `{None}`.
    pub fail_fast: bool,
    pub concurrency: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fail_fast: false,
            concurrency: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("record {index}: {source}")]
    Tagger { index: usize, source: InferenceError },
}

/// Tags every record and scores the result. Classification may run
/// concurrently; scoring is in corpus order.
pub fn run_eval(
    corpus: &[LabeledRequest],
    tagger: &dyn Tagger,
    tx: &Taxonomy,
    syn: &SynonymTable,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let results = tag_all(corpus, tagger, tx, opts.concurrency.max(1));
    let mut predicted = Vec::with_capacity(corpus.len());
    let mut failures = 0;
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => predicted.push(t),
            Err(source) if opts.fail_fast => return Err(EvalError::Tagger { index, source }),
            Err(e) => {
                tracing::warn!(index, "tagger failed: {e}");
                failures += 1;
                predicted.push(TagSet::none(TagSource::Llm));
            }
        }
    }
    let truth: Vec<TagSet> = corpus.iter().map(|r| r.ground_truth.clone()).collect();
    let mut report = score_predictions(&truth, &predicted, tx);
    report.tagger_failures = failures;
    for r in corpus {
        if let Some(expected) = &r.expected_variables {
            report.variables_checked += 1;
            let d = extract_tag_params(&r.ground_truth, &r.request, syn, tx);
            if &d.variables == expected {
                report.variables_matched += 1;
            }
        }
    }
    Ok(report)
}

fn tag_all(
    corpus: &[LabeledRequest],
    tagger: &dyn Tagger,
    tx: &Taxonomy,
    workers: usize,
) -> Vec<Result<TagSet, InferenceError>> {
    if workers == 1 || corpus.len() < 2 {
        return corpus.iter().map(|r| tagger.tag(&r.request, tx)).collect();
    }
    let chunk = corpus.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = corpus
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| tagger.tag(&r.request, tx)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("eval worker panicked"))
            .collect()
    })
}

/// Number of records whose ground truth carries each tag. Every taxonomy
/// tag is present, with zero when unseen.
pub fn tag_popularity(corpus: &[LabeledRequest], tx: &Taxonomy) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = tx.entries().iter().map(|e| (e.tag.name.clone(), 0)).collect();
    for r in corpus {
        for t in r.ground_truth.iter() {
            *out.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    out
}

/// Tag counts over an audit log, for traffic already seen by the proxy.
pub fn log_popularity(records: &[LogRecord], tx: &Taxonomy) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = tx.entries().iter().map(|e| (e.tag.name.clone(), 0)).collect();
    for r in records {
        for t in &r.tags {
            *out.entry(t.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// One labelled prediction, for scoring predictions made elsewhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: Vec<String>,
    pub predicted: Vec<String>,
}

pub fn read_predictions(input: impl BufRead) -> Result<Vec<PredictionRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn score_prediction_records(records: &[PredictionRecord], tx: &Taxonomy) -> EvalReport {
    let truth: Vec<TagSet> = records
        .iter()
        .map(|r| TagSet::new(r.truth.iter().cloned(), TagSource::Oracle))
        .collect();
    let predicted: Vec<TagSet> = records
        .iter()
        .map(|r| TagSet::new(r.predicted.iter().cloned(), TagSource::Llm))
        .collect();
    score_predictions(&truth, &predicted, tx)
}

/// Builds cache preload records: one per distinct endpoint, tagged from
/// its first occurrence in the corpus.
pub fn preload_records(
    corpus: &[LabeledRequest],
    tagger: &dyn Tagger,
    tx: &Taxonomy,
    syn: &SynonymTable,
) -> Result<Vec<PreloadRecord>, EvalError> {
    let mut seen: BTreeMap<CacheKey, ()> = BTreeMap::new();
    let mut out = Vec::new();
    for (index, r) in corpus.iter().enumerate() {
        let key = request_key(&r.request);
        if seen.insert(key.clone(), ()).is_some() {
            continue;
        }
        let tags = tagger.tag(&r.request, tx).map_err(|source| EvalError::Tagger { index, source })?;
        let detail = extract_tag_params(&tags, &r.request, syn, tx);
        out.push(PreloadRecord {
            method: key.method,
            path: key.path,
            tags: tags.iter().map(str::to_string).collect(),
            param_names: detail.param_names,
        });
    }
    Ok(out)
}
