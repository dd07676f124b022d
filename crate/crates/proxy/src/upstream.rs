//! A stub upstream application for tests and benchmarks. It answers every
//! request with `200 upstream <method> <target>` and remembers what it saw.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use tokio::net::TcpListener;
use tokio::sync::watch;

/// What the stub received for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeenRequest {
    pub method: String,
    pub target: String,
    /// Header names are lowercase.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Default)]
struct Shared {
    count: AtomicU64,
    seen: Mutex<Vec<SeenRequest>>,
    keep: bool,
    delay: Option<Duration>,
}

/// Handle to a running stub. Dropping it stops the listener.
pub struct StubUpstream {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubOptions {
    /// Keep a copy of every request. Off for benchmarks.
    pub record: bool,
    /// Simulated application work per request.
    pub delay: Option<Duration>,
}

impl StubUpstream {
    pub async fn start(opts: StubOptions) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().unwrap(), opts).await
    }

    pub async fn bind(addr: SocketAddr, opts: StubOptions) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            keep: opts.record,
            delay: opts.delay,
            ..Default::default()
        });
        let (stop, mut stopped) = watch::channel(false);
        let s = shared.clone();
        tokio::spawn(async move {
            loop {
                let (stream, _) = tokio::select! {
                    r = listener.accept() => match r {
                        Ok(c) => c,
                        Err(_) => continue,
                    },
                    _ = stopped.changed() => return,
                };
                let _ = stream.set_nodelay(true);
                let s = s.clone();
                tokio::spawn(async move {
                    let svc = service_fn(move |req| answer(s.clone(), req));
                    let _ = http1::Builder::new()
                        .preserve_header_case(true)
                        .serve_connection(TokioIo::new(stream), svc)
                        .await;
                });
            }
        });
        Ok(Self { addr, shared, stop })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests answered so far.
    pub fn count(&self) -> u64 {
        self.shared.count.load(Ordering::SeqCst)
    }

    /// Recorded requests, when recording is on.
    pub fn seen(&self) -> Vec<SeenRequest> {
        self.shared.seen.lock().unwrap().clone()
    }
}

impl Drop for StubUpstream {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
    }
}

/// The body the stub sends for a request.
pub fn expected_body(method: &str, target: &str) -> String {
    format!("upstream {method} {target}\n")
}

async fn answer(shared: Arc<Shared>, req: Request<Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    let method = req.method().to_string();
    let target = req.uri().path_and_query().map(|p| p.as_str()).unwrap_or("/").to_string();
    let headers = if shared.keep {
        header_pairs(&req)
    } else {
        Vec::new()
    };
    let body = req.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    if let Some(d) = shared.delay {
        tokio::time::sleep(d).await;
    }
    if shared.keep {
        shared.seen.lock().unwrap().push(SeenRequest {
            method: method.clone(),
            target: target.clone(),
            headers,
            body: body.to_vec(),
        });
    }
    shared.count.fetch_add(1, Ordering::SeqCst);
    let text = expected_body(&method, &target);
    Ok(Response::builder()
        .header("content-type", "text/plain")
        .header("x-upstream", "stub")
        .body(Full::new(Bytes::from(text)))
        .unwrap())
}

fn header_pairs<B>(req: &Request<B>) -> Vec<(String, String)> {
    req.headers()
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect()
}
