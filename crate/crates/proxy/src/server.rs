//! The reverse proxy: every request goes through the pipeline and is then
//! either forwarded to the upstream or answered with 403.

use std::convert::Infallible;
use std::future::Future;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use http_body_util::combinators::BoxBody;
use http_body_util::{BodyExt, Full, LengthLimitError, Limited};
use hyper::body::Incoming;
use hyper::header::{HeaderValue, CONTENT_TYPE};
use hyper::http::request::Parts;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response, StatusCode, Uri};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::{TokioExecutor, TokioIo};
use hyper_util::server::graceful::GracefulShutdown;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use flowtag_core::audit_log::AuditLog;
use flowtag_core::http_model::{request_key, Headers, ParsedRequest};
use flowtag_core::pipeline::{Pipeline, PipelineOutcome, Tagging};

/// The one header the proxy adds to forwarded requests.
pub const TRACE_HEADER: &str = "x-flowtag-trace-id";

pub type ProxyBody = BoxBody<Bytes, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Debug, Default)]
pub struct Counters {
    pub requests: AtomicU64,
    pub forwarded: AtomicU64,
    pub denied: AtomicU64,
    pub upstream_errors: AtomicU64,
}

pub struct ProxyState {
    /// `None` forwards everything without looking at it.
    pub pipeline: Option<Arc<Pipeline>>,
    pub upstream: SocketAddr,
    pub max_body: usize,
    pub upstream_timeout: Duration,
    pub log: Option<Arc<AuditLog>>,
    pub counters: Counters,
    client: Client<HttpConnector, Full<Bytes>>,
    trace_prefix: u64,
    trace_seq: AtomicU64,
}

impl ProxyState {
    pub fn new(pipeline: Option<Arc<Pipeline>>, upstream: SocketAddr) -> Self {
        let mut connector = HttpConnector::new();
        connector.set_nodelay(true);
        let client = Client::builder(TokioExecutor::new())
            .http1_preserve_header_case(true)
            .pool_idle_timeout(Duration::from_secs(30))
            .build(connector);
        let boot = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
        Self {
            pipeline,
            upstream,
            max_body: flowtag_core::http_model::DEFAULT_MAX_BODY,
            upstream_timeout: Duration::from_secs(30),
            log: None,
            counters: Counters::default(),
            client,
            trace_prefix: boot,
            trace_seq: AtomicU64::new(0),
        }
    }

    pub fn with_log(mut self, log: Arc<AuditLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_max_body(mut self, n: usize) -> Self {
        self.max_body = n;
        self
    }

    pub fn with_upstream_timeout(mut self, d: Duration) -> Self {
        self.upstream_timeout = d;
        self
    }

    fn next_trace_id(&self) -> String {
        let n = self.trace_seq.fetch_add(1, Ordering::Relaxed);
        format!("{:016x}-{n:08x}", self.trace_prefix)
    }
}

/// A proxy running on a background task.
pub struct RunningProxy {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl RunningProxy {
    /// Stops accepting, drains in-flight requests and flushes the log.
    pub async fn shutdown(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Binds `listen` and serves on a background task.
pub async fn spawn(listen: SocketAddr, state: Arc<ProxyState>, grace: Duration) -> std::io::Result<RunningProxy> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel();
    let task = tokio::spawn(run(listener, state, async {
        let _ = stopped.await;
    }, grace));
    Ok(RunningProxy {
        addr,
        stop: Some(stop),
        task,
    })
}

/// Accepts connections until `shutdown` resolves, then gives in-flight
/// requests up to `grace` to finish.
pub async fn run(listener: TcpListener, state: Arc<ProxyState>, shutdown: impl Future<Output = ()>, grace: Duration) {
    let graceful = GracefulShutdown::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(c) => c,
                    Err(e) => {
                        tracing::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                let st = state.clone();
                let svc = service_fn(move |req| handle(st.clone(), peer, req));
                let conn = http1::Builder::new()
                    .preserve_header_case(true)
                    .serve_connection(TokioIo::new(stream), svc);
                let conn = graceful.watch(conn);
                tokio::spawn(async move {
                    if let Err(e) = conn.await {
                        tracing::debug!("connection from {peer}: {e}");
                    }
                });
            }
            _ = &mut shutdown => break,
        }
    }
    drop(listener);
    if tokio::time::timeout(grace, graceful.shutdown()).await.is_err() {
        tracing::warn!("shutdown grace period of {grace:?} expired with requests in flight");
    }
    if let Some(log) = state.log.clone() {
        let _ = tokio::task::spawn_blocking(move || log.shutdown()).await;
    }
}

async fn handle(
    state: Arc<ProxyState>,
    peer: SocketAddr,
    req: Request<Incoming>,
) -> Result<Response<ProxyBody>, Infallible> {
    let start = Instant::now();
    state.counters.requests.fetch_add(1, Ordering::Relaxed);
    let trace_id = state.next_trace_id();
    let (parts, body) = req.into_parts();
    let body = match Limited::new(body, state.max_body).collect().await {
        Ok(b) => b.to_bytes(),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => {
            return Ok(plain(StatusCode::PAYLOAD_TOO_LARGE, "request body too large\n"));
        }
        Err(_) => return Ok(plain(StatusCode::BAD_REQUEST, "cannot read request body\n")),
    };

    let outcome = match &state.pipeline {
        Some(p) => Some(run_pipeline(p.clone(), parsed(&parts, &body, peer.ip()), start).await),
        None => None,
    };

    if let Some(o) = outcome.as_ref().filter(|o| o.decision.is_deny()) {
        state.counters.denied.fetch_add(1, Ordering::Relaxed);
        let body = o.decision.deny_body(&trace_id).into_bytes();
        emit(&state, o, &trace_id, peer.ip(), start, None);
        let mut resp = Response::new(full(body));
        *resp.status_mut() = StatusCode::FORBIDDEN;
        resp.headers_mut().insert(CONTENT_TYPE, HeaderValue::from_static("application/json"));
        return Ok(resp);
    }

    let resp = forward(&state, parts, body, &trace_id).await;
    if let Some(o) = &outcome {
        emit(&state, o, &trace_id, peer.ip(), start, Some(resp.status().as_u16()));
    }
    Ok(resp)
}

/// Cache hits are handled inline. Misses classify on the blocking pool so
/// that a slow model only holds up its own request.
async fn run_pipeline(p: Arc<Pipeline>, r: ParsedRequest, start: Instant) -> PipelineOutcome {
    let ts = p.clock.now();
    let key = request_key(&r);
    if let Some(hit) = p.lookup(&key) {
        return p.finish(&r, key, Tagging::Hit(hit), ts, start);
    }
    let r = Arc::new(r);
    let (p2, r2) = (p.clone(), r.clone());
    let tagging = tokio::task::spawn_blocking(move || p2.classify(&r2))
        .await
        .unwrap_or_else(|_| Tagging::Failed("tagger panicked".into()));
    p.finish(&r, key, tagging, ts, start)
}

fn parsed(parts: &Parts, body: &Bytes, peer: IpAddr) -> ParsedRequest {
    let mut headers = Headers::new();
    for (name, value) in &parts.headers {
        headers.append(name.as_str(), String::from_utf8_lossy(value.as_bytes()).into_owned());
    }
    let target = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    ParsedRequest::from_parts(parts.method.as_str(), target, headers, body.to_vec(), peer)
}

async fn forward(state: &ProxyState, mut parts: Parts, body: Bytes, trace_id: &str) -> Response<ProxyBody> {
    let pq = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    parts.uri = match Uri::try_from(format!("http://{}{}", state.upstream, pq)) {
        Ok(u) => u,
        Err(_) => return plain(StatusCode::BAD_REQUEST, "bad request target\n"),
    };
    parts
        .headers
        .insert(TRACE_HEADER, HeaderValue::from_str(trace_id).expect("trace ids are ascii"));
    let req = Request::from_parts(parts, Full::new(body));
    match tokio::time::timeout(state.upstream_timeout, state.client.request(req)).await {
        Ok(Ok(resp)) => {
            state.counters.forwarded.fetch_add(1, Ordering::Relaxed);
            resp.map(|b| b.map_err(|e| Box::new(e) as _).boxed())
        }
        Ok(Err(e)) => {
            tracing::warn!("upstream {}: {e}", state.upstream);
            state.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            plain(StatusCode::BAD_GATEWAY, "upstream unavailable\n")
        }
        Err(_) => {
            tracing::warn!("upstream {} timed out", state.upstream);
            state.counters.upstream_errors.fetch_add(1, Ordering::Relaxed);
            plain(StatusCode::BAD_GATEWAY, "upstream timed out\n")
        }
    }
}

fn emit(state: &ProxyState, o: &PipelineOutcome, trace_id: &str, ip: IpAddr, start: Instant, status: Option<u16>) {
    if let Some(log) = &state.log {
        let mut rec = o.log_record(trace_id, &ip.to_string());
        rec.total_us = Some(start.elapsed().as_micros() as u64);
        rec.upstream_status = status;
        log.emit(rec);
    }
}

fn full(b: impl Into<Bytes>) -> ProxyBody {
    Full::new(b.into()).map_err(|never| match never {}).boxed()
}

fn plain(status: StatusCode, text: &'static str) -> Response<ProxyBody> {
    let mut resp = Response::new(full(text));
    *resp.status_mut() = status;
    resp.headers_mut().insert(CONTENT_TYPE, HeaderValue::from_static("text/plain"));
    resp
}
