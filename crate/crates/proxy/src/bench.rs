//! Latency bench: replays corpus requests against a stub upstream, directly
//! and through the proxy in several caching modes.
//!
//! All targets are started up front and request `i` is sent to every
//! target before request `i + 1`, so slow drift on the host affects every
//! mode alike.

use std::fmt;
use std::io::BufReader;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context as _;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::client::conn::http1::SendRequest;
use hyper::Request;
use hyper_util::rt::TokioIo;
use serde::Serialize;
use tokio::net::TcpStream;

use flowtag_core::eval::{preload_records, LabeledRequest, LatencyStats};
use flowtag_core::pipeline::Pipeline;
use flowtag_core::policy::PolicyConfig;
use flowtag_core::tag_cache::TagCache;
use flowtag_core::tag_params::{default_synonyms, SynonymTable};
use flowtag_core::tagging::{
    InferenceClient, LlmTagger, OracleTagger, PromptMode, RecordingClient, SimulatedModelClient, Tagger,
    TranscriptClient,
};
use flowtag_core::taxonomy::{default_taxonomy, Taxonomy};

use crate::server::{spawn, ProxyState, RunningProxy};
use crate::setup::{from_client, SharedClient};
use crate::upstream::{StubOptions, StubUpstream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BenchMode {
    /// Straight to the upstream, no proxy.
    Direct,
    /// Through the proxy with the pipeline switched off.
    NoPolicy,
    /// Pipeline on, cache filled before the run.
    PreCached,
    /// Pipeline on, cache starts empty.
    RuntimeCache,
    /// Pipeline on, every request classified.
    NoCache,
}

impl BenchMode {
    pub const ALL: [BenchMode; 5] = [
        BenchMode::Direct,
        BenchMode::NoPolicy,
        BenchMode::PreCached,
        BenchMode::RuntimeCache,
        BenchMode::NoCache,
    ];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown bench mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BenchTagger {
    Oracle,
    /// Recorded model answers served after a fixed delay.
    Transcript { latency: Duration },
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub requests: usize,
    pub warmup: usize,
    pub tagger: BenchTagger,
    pub mode: PromptMode,
    /// Work the stub upstream simulates per request.
    pub upstream_delay: Option<Duration>,
    pub policy: PolicyConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            requests: 5000,
            warmup: 200,
            tagger: BenchTagger::Oracle,
            mode: PromptMode::Single,
            upstream_delay: None,
            policy: permissive_policy(),
        }
    }
}

/// Limits high enough that no corpus request is denied, so every mode does
/// the same upstream work. All policies still run.
pub fn permissive_policy() -> PolicyConfig {
    PolicyConfig {
        record_threshold: u64::MAX / 2,
        max_purchase_qty: u64::MAX / 2,
        login_attempt_limit: u64::MAX / 2,
        cart_hold_limit: u64::MAX / 2,
        registration_limit: u64::MAX / 2,
        comment_limit: u64::MAX / 2,
        ..PolicyConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub stats: LatencyStats,
    pub inference_calls: u64,
    pub upstream_requests: u64,
    pub non_2xx: u64,
}

struct Target {
    mode: BenchMode,
    conn: SendRequest<Full<Bytes>>,
    proxy: Option<RunningProxy>,
    client: Option<SharedClient>,
    samples: Vec<u64>,
    non_2xx: u64,
}

/// A transcript covering every corpus request in `mode`.
pub fn record_transcript(corpus: &[LabeledRequest], tx: &Taxonomy, mode: PromptMode) -> TranscriptClient {
    let rec = Arc::new(RecordingClient::new(SimulatedModelClient));
    let client: Arc<dyn InferenceClient> = rec.clone();
    let tagger = LlmTagger::new(client, mode).with_fanout(1);
    for r in corpus {
        // the simulated model answers every well-formed prompt
        let _ = tagger.tag(&r.request, tx);
    }
    TranscriptClient::from_entries(rec.entries())
}

pub async fn run(corpus: &[LabeledRequest], modes: &[BenchMode], cfg: &BenchConfig) -> anyhow::Result<Vec<BenchRow>> {
    anyhow::ensure!(!corpus.is_empty(), "empty corpus");
    let tx = Arc::new(default_taxonomy());
    let syn = Arc::new(default_synonyms());
    let transcript = match cfg.tagger {
        BenchTagger::Transcript { latency } => Some(record_transcript(corpus, &tx, cfg.mode).with_latency(latency)),
        BenchTagger::Oracle => None,
    };
    let upstream = StubUpstream::start(StubOptions {
        record: false,
        delay: cfg.upstream_delay,
    })
    .await?;

    let mut targets = Vec::new();
    for &mode in modes {
        let (addr, proxy, client) = match mode {
            BenchMode::Direct => (upstream.addr(), None, None),
            BenchMode::NoPolicy => {
                let p = spawn_proxy(ProxyState::new(None, upstream.addr())).await?;
                (p.addr, Some(p), None)
            }
            _ => {
                let (pipeline, client) = bench_pipeline(mode, corpus, &tx, &syn, transcript.clone(), cfg)?;
                let p = spawn_proxy(ProxyState::new(Some(Arc::new(pipeline)), upstream.addr())).await?;
                (p.addr, Some(p), client)
            }
        };
        targets.push(Target {
            mode,
            conn: connect(addr).await?,
            proxy,
            client,
            samples: Vec::with_capacity(cfg.requests),
            non_2xx: 0,
        });
    }

    let requests: Vec<Request<Full<Bytes>>> = corpus.iter().map(to_hyper).collect::<anyhow::Result<_>>()?;
    let warm = Request::get("/bench/warmup").header("host", "bench").body(Full::new(Bytes::new()))?;
    for _ in 0..cfg.warmup {
        for t in targets.iter_mut() {
            send(&mut t.conn, clone_request(&warm)).await?;
        }
    }
    for t in targets.iter() {
        if let Some(c) = &t.client {
            c.reset();
        }
    }
    let before = upstream.count();

    for i in 0..cfg.requests {
        let req = &requests[i % requests.len()];
        for t in targets.iter_mut() {
            let start = Instant::now();
            let status = send(&mut t.conn, clone_request(req)).await?;
            t.samples.push(start.elapsed().as_micros() as u64);
            if !(200..300).contains(&status) {
                t.non_2xx += 1;
            }
        }
    }
    let forwarded = upstream.count() - before;

    let mut rows = Vec::new();
    for t in targets {
        rows.push(BenchRow {
            mode: t.mode,
            stats: LatencyStats::from_samples(&t.samples).expect("at least one request"),
            inference_calls: t.client.as_ref().map_or(0, |c| c.calls()),
            upstream_requests: forwarded / modes.len() as u64,
            non_2xx: t.non_2xx,
        });
        if let Some(p) = t.proxy {
            p.shutdown().await;
        }
    }
    Ok(rows)
}

fn bench_pipeline(
    mode: BenchMode,
    corpus: &[LabeledRequest],
    tx: &Arc<Taxonomy>,
    syn: &Arc<SynonymTable>,
    transcript: Option<TranscriptClient>,
    cfg: &BenchConfig,
) -> anyhow::Result<(Pipeline, Option<SharedClient>)> {
    let (tagger, client): (Arc<dyn Tagger>, _) = match transcript {
        Some(t) => {
            let built = from_client(Arc::new(t), cfg.mode);
            (built.tagger, built.client)
        }
        None => (Arc::new(OracleTagger), None),
    };
    let cache = match mode {
        BenchMode::NoCache => None,
        BenchMode::RuntimeCache => Some(Arc::new(TagCache::default())),
        _ => {
            let cache = TagCache::default();
            let recs = preload_records(corpus, &OracleTagger, tx, syn)?;
            let mut buf = Vec::new();
            for r in &recs {
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
            }
            cache.preload_from(BufReader::new(buf.as_slice()), Default::default())?;
            Some(Arc::new(cache))
        }
    };
    let pipeline = Pipeline::new(tx.clone(), syn.clone(), tagger)
        .with_cache(cache)
        .with_config(cfg.policy.clone());
    Ok((pipeline, client))
}

async fn spawn_proxy(state: ProxyState) -> std::io::Result<RunningProxy> {
    spawn("127.0.0.1:0".parse().unwrap(), Arc::new(state), Duration::from_secs(10)).await
}

/// Opens one keep-alive HTTP/1.1 connection.
pub async fn connect(addr: SocketAddr) -> anyhow::Result<SendRequest<Full<Bytes>>> {
    let stream = TcpStream::connect(addr).await.with_context(|| format!("connecting to {addr}"))?;
    stream.set_nodelay(true)?;
    let (send, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await?;
    tokio::spawn(async move {
        let _ = conn.await;
    });
    Ok(send)
}

/// Sends one request and reads the whole response; returns the status.
pub async fn send(conn: &mut SendRequest<Full<Bytes>>, req: Request<Full<Bytes>>) -> anyhow::Result<u16> {
    conn.ready().await?;
    let resp = conn.send_request(req).await?;
    let status = resp.status().as_u16();
    resp.into_body().collect().await?;
    Ok(status)
}

/// Converts a corpus request to a hyper request with the same method,
/// target, headers and body.
pub fn to_hyper(r: &LabeledRequest) -> anyhow::Result<Request<Full<Bytes>>> {
    let p = &r.request;
    let mut b = Request::builder().method(p.method.as_str()).uri(raw_target(&r.raw));
    for (k, v) in p.headers.iter() {
        if k.eq_ignore_ascii_case("transfer-encoding") || k.eq_ignore_ascii_case("content-length") {
            continue;
        }
        b = b.header(k, v);
    }
    Ok(b.body(Full::new(Bytes::from(p.body_raw.clone())))?)
}

/// The request-target exactly as written in a raw request.
fn raw_target(raw: &str) -> &str {
    raw.lines()
        .next()
        .and_then(|l| l.split(' ').nth(1))
        .unwrap_or("/")
}

fn clone_request(r: &Request<Full<Bytes>>) -> Request<Full<Bytes>> {
    let mut b = Request::builder().method(r.method().clone()).uri(r.uri().clone());
    for (k, v) in r.headers() {
        b = b.header(k, v);
    }
    b.body(r.body().clone()).expect("cloned request is valid")
}

/// Plain-text table of bench results.
pub fn render(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<13} {:>8} {:>11} {:>11} {:>11} {:>10} {:>8}\n",
        "mode", "requests", "mean_us", "median_us", "p95_us", "inference", "non_2xx"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<13} {:>8} {:>11.1} {:>11.1} {:>11.1} {:>10} {:>8}\n",
            r.mode.to_string(),
            r.stats.count,
            r.stats.mean_us,
            r.stats.median_us,
            r.stats.p95_us,
            r.inference_calls,
            r.non_2xx
        ));
    }
    out
}
