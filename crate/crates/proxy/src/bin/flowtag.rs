use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use flowtag_core::audit_log::read_log;
use flowtag_core::config::{AppConfig, TaggerKind};
use flowtag_core::eval::{
    load_corpus, log_popularity, preload_records, read_predictions, run_eval, score_prediction_records,
    tag_popularity, Corpus, EvalOptions,
};
use flowtag_core::replay::{decisions_jsonl, read_session, replay};
use flowtag_core::tagging::{InferenceClient, LlmTagger, PromptMode, RecordingClient, SimulatedModelClient, Tagger};
use flowtag_core::taxonomy::Taxonomy;

use flowtag_proxy::bench::{self, BenchConfig, BenchMode, BenchTagger};
use flowtag_proxy::setup::{build_pipeline, build_state, build_tagger};
use flowtag_proxy::{server, StubOptions, StubUpstream};

#[derive(Parser)]
#[command(name = "flowtag", version, about = "Flow-tagging API security proxy and evaluation tools")]
struct Cli {
    /// Main config file (TOML).
    #[arg(long, short, global = true, env = "FLOWTAG_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the enforcing reverse proxy.
    Serve(ServeArgs),
    /// Classify a labelled corpus and report per-tag metrics.
    Eval(EvalArgs),
    /// Score a file of (truth, predicted) tag lists.
    Score {
        predictions: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Count tags in a corpus or an audit log.
    Popularity {
        #[arg(long, conflicts_with = "log", required_unless_present = "log")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Measure proxy latency in each caching mode.
    Bench(BenchArgs),
    /// Build a cache preload file from a corpus.
    PreloadGen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        tagger: TaggerArgs,
    },
    /// Record simulated model answers for every corpus request.
    RecordTranscript {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "single")]
        mode: PromptMode,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Replay a recorded session and print its decisions as JSON lines.
    Replay {
        session: PathBuf,
        #[command(flatten)]
        tagger: TaggerArgs,
    },
    /// Run the stub upstream on its own.
    StubUpstream {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: SocketAddr,
        #[arg(long, value_parser = humantime_duration)]
        delay: Option<Duration>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "FLOWTAG_LISTEN")]
    listen: Option<SocketAddr>,
    #[arg(long, env = "FLOWTAG_UPSTREAM")]
    upstream: Option<SocketAddr>,
    #[arg(long, env = "FLOWTAG_PRELOAD")]
    preload: Option<PathBuf>,
    #[arg(long, env = "FLOWTAG_LOG")]
    log: Option<PathBuf>,
    #[command(flatten)]
    tagger: TaggerArgs,
}

#[derive(Args, Clone)]
struct TaggerArgs {
    /// llm, oracle or transcript.
    #[arg(long, env = "FLOWTAG_TAGGER")]
    tagger: Option<TaggerKind>,
    /// single or parallel.
    #[arg(long, env = "FLOWTAG_MODE")]
    mode: Option<PromptMode>,
    #[arg(long, env = "FLOWTAG_TRANSCRIPT")]
    transcript: Option<PathBuf>,
}

impl TaggerArgs {
    fn apply(&self, cfg: &mut AppConfig) {
        if let Some(t) = self.tagger {
            cfg.proxy.tagger = t;
        }
        if let Some(m) = self.mode {
            cfg.proxy.mode = m;
        }
        if let Some(p) = &self.transcript {
            cfg.proxy.transcript = Some(p.clone());
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    tagger: TaggerArgs,
    /// Abort on malformed corpus lines.
    #[arg(long)]
    strict: bool,
    /// Abort on the first tagger failure.
    #[arg(long)]
    fail_fast: bool,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5000)]
    requests: usize,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    /// Comma-separated subset of Direct, NoPolicy, PreCached, RuntimeCache, NoCache.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<BenchMode>>,
    /// Use recorded model answers with this delay instead of the oracle.
    #[arg(long, value_parser = humantime_duration)]
    inference_latency: Option<Duration>,
    #[arg(long, default_value = "single")]
    mode: PromptMode,
    /// Simulated application work in the stub upstream.
    #[arg(long, value_parser = humantime_duration)]
    upstream_delay: Option<Duration>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn humantime_duration(s: &str) -> Result<Duration, String> {
    humantime::parse_duration(s).map_err(|e| e.to_string())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    match cli.cmd {
        Cmd::Serve(a) => serve(cfg, a),
        Cmd::Eval(a) => {
            a.tagger.apply(&mut cfg);
            eval(&cfg, a)
        }
        Cmd::Score { predictions, json } => {
            let recs = read_predictions(BufReader::new(open(&predictions)?))?;
            let report = score_prediction_records(&recs, &cfg.load_taxonomy()?);
            print!("{}", report.render_table());
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
            Ok(())
        }
        Cmd::Popularity { corpus, log } => {
            let tx = cfg.load_taxonomy()?;
            let counts = match (corpus, log) {
                (Some(c), _) => tag_popularity(&corpus_at(&c, false)?.records, &tx),
                (None, Some(l)) => log_popularity(&read_log(BufReader::new(open(&l)?))?, &tx),
                (None, None) => unreachable!("clap requires one source"),
            };
            for e in tx.entries() {
                println!("{:<20} {}", e.tag.name, counts.get(&e.tag.name).copied().unwrap_or(0));
            }
            Ok(())
        }
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::PreloadGen { corpus, out, tagger } => {
            tagger.apply(&mut cfg);
            let corpus = corpus_at(&corpus, false)?;
            let (tx, t) = tagger_for(&cfg)?;
            let recs = preload_records(&corpus.records, t.as_ref(), &tx, &cfg.load_synonyms()?)?;
            let mut w = BufWriter::new(File::create(&out)?);
            for r in &recs {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            eprintln!("wrote {} keys to {}", recs.len(), out.display());
            Ok(())
        }
        Cmd::RecordTranscript { corpus, mode, out } => {
            let corpus = corpus_at(&corpus, false)?;
            let tx = cfg.load_taxonomy()?;
            let rec = Arc::new(RecordingClient::new(SimulatedModelClient));
            let client: Arc<dyn InferenceClient> = rec.clone();
            let tagger = LlmTagger::new(client, mode).with_fanout(1);
            for (i, r) in corpus.records.iter().enumerate() {
                tagger.tag(&r.request, &tx).with_context(|| format!("record {}", i + 1))?;
            }
            let mut w = BufWriter::new(File::create(&out)?);
            rec.write_jsonl(&mut w)?;
            w.flush()?;
            eprintln!("wrote {} completions to {}", rec.entries().len(), out.display());
            Ok(())
        }
        Cmd::Replay { session, tagger } => {
            tagger.apply(&mut cfg);
            let (pipeline, _) = build_pipeline(&cfg)?;
            let session = read_session(BufReader::new(open(&session)?))?;
            let decisions = replay(&session, &pipeline)?;
            std::io::stdout().write_all(&decisions_jsonl(&decisions))?;
            Ok(())
        }
        Cmd::StubUpstream { listen, delay } => runtime()?.block_on(async move {
            let stub = StubUpstream::bind(listen, StubOptions { record: false, delay }).await?;
            eprintln!("stub upstream on {}", stub.addr());
            tokio::signal::ctrl_c().await?;
            eprintln!("served {} requests", stub.count());
            Ok(())
        }),
    }
}

fn serve(mut cfg: AppConfig, a: ServeArgs) -> anyhow::Result<()> {
    if let Some(l) = a.listen {
        cfg.proxy.listen = l;
    }
    if let Some(u) = a.upstream {
        cfg.proxy.upstream = u;
    }
    if let Some(p) = a.preload {
        cfg.cache.preload = Some(p);
    }
    if let Some(p) = a.log {
        cfg.log.path = Some(p);
    }
    a.tagger.apply(&mut cfg);
    let state = Arc::new(build_state(&cfg)?);
    let grace = cfg.proxy.shutdown_grace;
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.proxy.listen)
            .await
            .with_context(|| format!("binding {}", cfg.proxy.listen))?;
        tracing::info!(
            "listening on {}, upstream {}, tagger {:?} ({:?})",
            listener.local_addr()?,
            cfg.proxy.upstream,
            cfg.proxy.tagger,
            cfg.proxy.mode
        );
        let stats = state.clone();
        server::run(listener, state, shutdown_signal(), grace).await;
        let c = &stats.counters;
        tracing::info!(
            "stopped after {} requests ({} forwarded, {} denied, {} upstream errors)",
            c.requests.load(std::sync::atomic::Ordering::Relaxed),
            c.forwarded.load(std::sync::atomic::Ordering::Relaxed),
            c.denied.load(std::sync::atomic::Ordering::Relaxed),
            c.upstream_errors.load(std::sync::atomic::Ordering::Relaxed),
        );
        if let Some(log) = &stats.log {
            tracing::info!("audit log: {} written, {} dropped", log.written(), log.dropped());
        }
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
    tracing::info!("shutting down");
}

fn eval(cfg: &AppConfig, a: EvalArgs) -> anyhow::Result<()> {
    let corpus = corpus_at(&a.corpus, a.strict)?;
    let (tx, tagger) = tagger_for(cfg)?;
    let opts = EvalOptions {
        fail_fast: a.fail_fast,
        concurrency: a.concurrency,
    };
    let report = run_eval(&corpus.records, tagger.as_ref(), &tx, &cfg.load_synonyms()?, opts)?;
    print!("{}", report.render_table());
    if let Some(p) = a.json {
        write_json(&p, &report)?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<()> {
    let corpus = corpus_at(&a.corpus, false)?;
    let cfg = BenchConfig {
        requests: a.requests,
        warmup: a.warmup,
        tagger: match a.inference_latency {
            Some(latency) => BenchTagger::Transcript { latency },
            None => BenchTagger::Oracle,
        },
        mode: a.mode,
        upstream_delay: a.upstream_delay,
        ..BenchConfig::default()
    };
    let modes = a.modes.unwrap_or_else(|| BenchMode::ALL.to_vec());
    let rows = runtime()?.block_on(bench::run(&corpus.records, &modes, &cfg))?;
    print!("{}", bench::render(&rows));
    if let Some(p) = a.json {
        write_json(&p, &rows)?;
    }
    Ok(())
}

fn tagger_for(cfg: &AppConfig) -> anyhow::Result<(Taxonomy, Arc<dyn Tagger>)> {
    let tx = cfg.load_taxonomy()?;
    let built = build_tagger(cfg.proxy.tagger, cfg.proxy.mode, cfg.proxy.transcript.as_deref(), &cfg.inference)?;
    Ok((tx, built.tagger))
}

fn corpus_at(path: &Path, strict: bool) -> anyhow::Result<Corpus> {
    let c = load_corpus(path, strict)?;
    for (line, reason) in &c.skipped {
        eprintln!("{}:{line}: skipped: {reason}", path.display());
    }
    if c.records.is_empty() && !c.skipped.is_empty() {
        bail!("no usable records in {}", path.display());
    }
    Ok(c)
}

fn open(p: &Path) -> anyhow::Result<File> {
    File::open(p).with_context(|| format!("opening {}", p.display()))
}

fn write_json(p: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}
