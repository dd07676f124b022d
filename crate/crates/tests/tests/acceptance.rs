//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::Request;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowtag_core::context::{GroupBy, HistoryEntry, HistoryStore, Retention, Timestamp, WindowQuery};
use flowtag_core::eval::{
    load_corpus, read_predictions, run_eval, score_prediction_records, EvalOptions, LabeledRequest,
};
use flowtag_core::http_model::{parse_request, request_key, CacheKey, ParsedRequest, SourceAttributes};
use flowtag_core::pipeline::Pipeline;
use flowtag_core::policy::{policy_fn, Check, Outcome, PolicyChain, PolicyConfig};
use flowtag_core::replay::{decisions_jsonl, read_session, replay, write_session};
use flowtag_core::tag_params::{default_synonyms, extract_tag_params, TagDetail};
use flowtag_core::tagging::{
    InferenceClient, InferenceError, OracleTagger, PromptMode, PromptText, TagSet, TagSource, Tagger,
    TranscriptClient,
};
use flowtag_core::taxonomy::{default_taxonomy, Taxonomy, NONE};

use flowtag_proxy::bench::{self, BenchConfig, BenchMode, BenchTagger};
use flowtag_proxy::setup::from_client;
use flowtag_proxy::{spawn, ProxyState, RunningProxy, StubOptions, StubUpstream};

type Outcome_ = Result<String, String>;
type Criterion = Box<dyn Fn(&tokio::runtime::Runtime) -> Outcome_>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("window aggregation matches a brute-force oracle", Box::new(|_| c1_oracle_equivalence())),
        ("session replay is deterministic", Box::new(|_| c2_replay_determinism())),
        ("threshold and window boundaries", Box::new(|_| c3_boundaries())),
        ("one inference per cache key", Box::new(|_| c4_cache_contract())),
        ("end-to-end enforcement", Box::new(c5_end_to_end)),
        ("extraction on the two feed requests", Box::new(|_| c6_extraction())),
        ("metric identities", Box::new(|_| c7_metrics())),
        ("latency overhead", Box::new(c8_latency)),
        ("pipeline invariants", Box::new(c9_invariants)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&rt)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

// ---- 1 -------------------------------------------------------------------

const PRODUCTS: [&str; 4] = ["P1", "P2", "P3", "P4"];
const VALUES: [&str; 9] = ["1", "2", "3", "4.5", "10", "0", "-3", "abc", "7"];
const TAG_POOL: [&str; 5] = ["Login", "PurchaseProduct", "AddToCart", "Commenting", "None"];

fn c1_oracle_equivalence() -> Outcome_ {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let keys: Vec<CacheKey> = (0..5).map(|i| CacheKey::new("POST", &format!("/e{i}"))).collect();
    let ips: Vec<String> = (1..=8).map(|i| format!("203.0.113.{i}")).collect();
    let t0 = 1_700_000_000_000u64;
    let store = HistoryStore::new(Retention::default());
    let mut all: Vec<HistoryEntry> = Vec::new();
    for _ in 0..1000 {
        let ts = Timestamp(t0 + rng.gen_range(0..1_200_000));
        let key = &keys[rng.gen_range(0..keys.len())];
        let ip: std::net::IpAddr = ips[rng.gen_range(0..ips.len())].parse().unwrap();
        let mut vars = BTreeMap::new();
        if rng.gen_bool(0.9) {
            vars.insert("quantity".to_string(), VALUES[rng.gen_range(0..VALUES.len())].to_string());
        }
        vars.insert("product_id".to_string(), PRODUCTS[rng.gen_range(0..PRODUCTS.len())].to_string());
        let tags: Vec<&str> = (0..rng.gen_range(1..3)).map(|_| TAG_POOL[rng.gen_range(0..TAG_POOL.len())]).collect();
        let detail = TagDetail {
            tags: TagSet::new(tags, TagSource::Oracle),
            variables: vars,
            param_names: BTreeMap::new(),
            missing: BTreeSet::new(),
        };
        let src = SourceAttributes {
            client_ip: ip,
            forwarded_for: None,
            real_ip: None,
        };
        all.push((*store.record_request(key, ts, &src, &detail)).clone());
    }

    for qi in 0..100 {
        let now = t0 + rng.gen_range(0..1_300_000);
        let w = Duration::from_millis(rng.gen_range(1_000..900_000));
        let key = &keys[rng.gen_range(0..keys.len())];
        let having: BTreeMap<String, String> = if rng.gen_bool(0.5) {
            BTreeMap::from([("product_id".into(), PRODUCTS[rng.gen_range(0..PRODUCTS.len())].into())])
        } else {
            BTreeMap::new()
        };
        let exclude = rng.gen_bool(0.3).then(|| rng.gen_range(0..1000u64));
        let source = rng.gen_bool(0.3).then(|| ips[rng.gen_range(0..ips.len())].clone());
        let mut q = WindowQuery::new(Timestamp(now), w).excluding(exclude);
        if let Some(s) = &source {
            q = q.from_source(GroupBy::ClientIp, s.clone());
        }

        // brute force: plain filter and sum over every recorded entry
        let lower = now as i128 - w.as_millis() as i128;
        let inside = |e: &HistoryEntry| {
            (e.ts.0 as i128) > lower
                && e.ts.0 <= now
                && Some(e.seq) != exclude
                && source.as_ref().is_none_or(|s| &e.src.client_ip == s)
        };
        let mut sorted: Vec<&HistoryEntry> = all.iter().collect();
        sorted.sort_by_key(|e| (e.ts, e.seq));
        let (mut sum, mut counted, mut skipped) = (0.0f64, 0usize, 0usize);
        for e in sorted.iter().filter(|e| &e.key == key && inside(e)) {
            if !having.iter().all(|(k, v)| e.variables.get(k) == Some(v)) {
                continue;
            }
            match e.variables.get("quantity").and_then(|v| v.parse::<f64>().ok()) {
                Some(x) if x >= 0.0 => {
                    sum += x;
                    counted += 1;
                }
                _ => skipped += 1,
            }
        }
        let got = store.window_aggregate(key, &q, "quantity", &having);
        ensure(
            got.sum == sum && got.counted == counted && got.skipped == skipped,
            format!("query {qi}: aggregate {got:?}, oracle sum {sum} counted {counted} skipped {skipped}"),
        )?;

        let tag = TAG_POOL[rng.gen_range(0..TAG_POOL.len() - 1)];
        let mut expected: BTreeMap<String, u64> = BTreeMap::new();
        for e in all.iter().filter(|e| e.tags.contains(tag) && inside(e)) {
            *expected.entry(e.src.client_ip.clone()).or_default() += 1;
        }
        let counts = store.count_by_tag(tag, &q, GroupBy::ClientIp);
        ensure(counts == expected, format!("query {qi}: count_by_tag({tag}) {counts:?} != {expected:?}"))?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(5), format!("took {took:?}"))?;
    Ok(format!("1000 entries, 100 queries, exact, {} ms", took.as_millis()))
}

// ---- 2 -------------------------------------------------------------------

fn transcript_pipeline(mode: PromptMode) -> Pipeline {
    let file = match mode {
        PromptMode::Single => "transcript_single.jsonl",
        PromptMode::Parallel => "transcript_parallel.jsonl",
    };
    let client = TranscriptClient::load(&fixture(file)).expect("transcript fixture");
    let built = from_client(Arc::new(client), mode);
    Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), built.tagger)
}

fn c2_replay_determinism() -> Outcome_ {
    let text = std::fs::read(fixture("session_500.jsonl")).map_err(|e| e.to_string())?;
    let session = read_session(text.as_slice()).map_err(|e| e.to_string())?;
    ensure(session.len() == 500, format!("session has {} requests", session.len()))?;
    let mut denies = 0;
    for mode in [PromptMode::Single, PromptMode::Parallel] {
        let mut runs = Vec::new();
        let mut current = session.clone();
        for _ in 0..2 {
            let mut buf = Vec::new();
            write_session(&current, &mut buf).map_err(|e| e.to_string())?;
            current = read_session(buf.as_slice()).map_err(|e| e.to_string())?;
            let decisions = replay(&current, &transcript_pipeline(mode)).map_err(|e| e.to_string())?;
            denies = decisions.iter().filter(|d| d.is_deny()).count();
            runs.push(decisions_jsonl(&decisions));
        }
        ensure(runs[0] == runs[1], format!("{mode:?}: decision sequences differ"))?;
    }
    ensure(denies > 0, "session produced no denials")?;
    Ok(format!("500 requests, 2 replays per mode, identical bytes, {denies} denials"))
}

// ---- 3 -------------------------------------------------------------------

fn oracle_pipeline(cfg: PolicyConfig) -> Pipeline {
    Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), Arc::new(OracleTagger)).with_config(cfg)
}

fn req(raw: &str, peer: &str) -> ParsedRequest {
    parse_request(raw.as_bytes(), peer.parse().unwrap()).unwrap()
}

fn purchase(qty: u64) -> String {
    let body = format!("{{\"product_id\":\"SKU-1\",\"quantity\":{qty}}}");
    format!(
        "POST /checkout HTTP/1.1\r\nHost: shop.test\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
}

fn login() -> String {
    let body = "username=alice&password=hunter2";
    format!(
        "POST /login HTTP/1.1\r\nHost: shop.test\r\nContent-Type: application/x-www-form-urlencoded\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
}

fn c3_boundaries() -> Outcome_ {
    let t0 = 1_700_000_000_000u64;
    let ms = |secs: u64| t0 + secs * 1000;
    let mut cases = 0;
    for max in [2u64, 5, 10, 17, 100] {
        let cfg = PolicyConfig {
            max_purchase_qty: max,
            ..PolicyConfig::default()
        };
        // a single purchase at the limit and just under it
        for (qty, want) in [(max, Outcome::Deny), (max - 1, Outcome::Allow)] {
            let p = oracle_pipeline(cfg.clone());
            let got = p.process_at(&req(&purchase(qty), "10.0.0.1"), Timestamp(t0)).decision.outcome;
            ensure(got == want, format!("max {max}, single purchase {qty}: {got:?}"))?;
            cases += 1;
        }
        // two purchases whose total is at the limit and just under it
        for (second, want) in [(max - 1, Outcome::Deny), (max - 2, Outcome::Allow)] {
            let p = oracle_pipeline(cfg.clone());
            p.process_at(&req(&purchase(1), "10.0.0.1"), Timestamp(t0));
            let got = p.process_at(&req(&purchase(second), "10.0.0.1"), Timestamp(ms(1))).decision.outcome;
            ensure(got == want, format!("max {max}, 1 + {second}: {got:?}"))?;
            cases += 1;
        }
    }
    for threshold in [1u64, 10, 100] {
        let cfg = PolicyConfig {
            record_threshold: threshold,
            ..PolicyConfig::default()
        };
        for (n, want) in [(threshold, Outcome::Deny), (threshold.saturating_sub(1), Outcome::Allow)] {
            let raw = format!("GET /feed/list?count={n} HTTP/1.1\r\nHost: h\r\n\r\n");
            let got = oracle_pipeline(cfg.clone()).process_at(&req(&raw, "10.0.0.1"), Timestamp(t0)).decision.outcome;
            ensure(got == want, format!("record_threshold {threshold}, count={n}: {got:?}"))?;
            cases += 1;
        }
    }
    for limit in [1u64, 3, 5] {
        let cfg = PolicyConfig {
            login_attempt_limit: limit,
            ..PolicyConfig::default()
        };
        let p = oracle_pipeline(cfg);
        for i in 0..=limit {
            let got = p.process_at(&req(&login(), "10.0.0.2"), Timestamp(ms(i))).decision.outcome;
            let want = if i < limit { Outcome::Allow } else { Outcome::Deny };
            ensure(got == want, format!("login limit {limit}, attempt {}: {got:?}", i + 1))?;
            cases += 1;
        }
    }
    // 5 minute window: an earlier purchase of 6 counts 1 s before the edge,
    // not at the edge and not 1 s after
    for (offset, want) in [(299i64, Outcome::Deny), (300, Outcome::Allow), (301, Outcome::Allow)] {
        let p = oracle_pipeline(PolicyConfig::default());
        p.process_at(&req(&purchase(6), "10.0.0.3"), Timestamp(t0));
        let at = Timestamp((t0 as i64 + offset * 1000) as u64);
        let got = p.process_at(&req(&purchase(4), "10.0.0.3"), at).decision.outcome;
        ensure(got == want, format!("purchase window, second request at +{offset}s: {got:?}"))?;
        cases += 1;
    }
    for (offset, want) in [(299i64, Outcome::Deny), (301, Outcome::Allow)] {
        let p = oracle_pipeline(PolicyConfig::default());
        for i in 0..5 {
            p.process_at(&req(&login(), "10.0.0.4"), Timestamp(t0 + i));
        }
        let at = Timestamp((t0 as i64 + 4 + offset * 1000) as u64);
        let got = p.process_at(&req(&login(), "10.0.0.4"), at).decision.outcome;
        ensure(got == want, format!("login window, 6th attempt at +{offset}s: {got:?}"))?;
        cases += 1;
    }
    Ok(format!("{cases} boundary cases"))
}

// ---- 4 -------------------------------------------------------------------

fn c4_cache_contract() -> Outcome_ {
    let corpus = load_corpus(&fixture("corpus.jsonl"), true).map_err(|e| e.to_string())?.records;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let stream: Vec<&LabeledRequest> = (0..5000).map(|_| &corpus[rng.gen_range(0..corpus.len())]).collect();
    let distinct: HashSet<CacheKey> = stream.iter().map(|r| request_key(&r.request)).collect();
    let tags = default_taxonomy().entries().iter().filter(|e| e.tag.name != NONE).count() as u64;
    let mut report = Vec::new();
    for (mode, per_key) in [(PromptMode::Single, 1u64), (PromptMode::Parallel, tags)] {
        let file = if mode == PromptMode::Single {
            "transcript_single.jsonl"
        } else {
            "transcript_parallel.jsonl"
        };
        let built = from_client(
            Arc::new(TranscriptClient::load(&fixture(file)).map_err(|e| e.to_string())?),
            mode,
        );
        let client = built.client.clone().unwrap();
        let p = Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), built.tagger);
        for (i, r) in stream.iter().enumerate() {
            let d = p.process_at(&r.request, Timestamp(1_700_000_000_000 + i as u64 * 50)).decision;
            ensure(
                !d.reasons.iter().any(|x| x.policy == "InferenceUnavailable"),
                format!("{mode:?}: inference failed for {}", r.raw.lines().next().unwrap_or("")),
            )?;
        }
        let want = distinct.len() as u64 * per_key;
        ensure(
            client.calls() == want,
            format!("{mode:?}: {} calls, expected {want} ({} keys x {per_key})", client.calls(), distinct.len()),
        )?;
        report.push(format!("{mode:?} {} calls", client.calls()));
    }
    Ok(format!("5000 requests, {} keys, {tags} tags: {}", distinct.len(), report.join(", ")))
}

// ---- 5 -------------------------------------------------------------------

async fn start_proxy(upstream: SocketAddr, cfg: PolicyConfig) -> RunningProxy {
    let p = oracle_pipeline(cfg);
    let state = ProxyState::new(Some(Arc::new(p)), upstream);
    spawn("127.0.0.1:0".parse().unwrap(), Arc::new(state), Duration::from_secs(10)).await.unwrap()
}

/// Sends a raw corpus-style request and returns status and body.
async fn call(addr: SocketAddr, raw: &str) -> (u16, Vec<u8>) {
    let r = req(raw, "127.0.0.1");
    let mut b = Request::builder().method(r.method.as_str()).uri(raw.split(' ').nth(1).unwrap());
    for (k, v) in r.headers.iter() {
        b = b.header(k, v);
    }
    let mut conn = bench::connect(addr).await.unwrap();
    let resp = conn.send_request(b.body(Full::new(Bytes::from(r.body_raw))).unwrap()).await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn c5_end_to_end(rt: &tokio::runtime::Runtime) -> Outcome_ {
    rt.block_on(async {
        let stub = StubUpstream::start(StubOptions::default()).await.unwrap();
        let proxy = start_proxy(stub.addr(), PolicyConfig::default()).await;
        let mut statuses = Vec::new();
        for _ in 0..3 {
            statuses.push(call(proxy.addr, &purchase(4)).await);
        }
        let codes: Vec<u16> = statuses.iter().map(|s| s.0).collect();
        ensure(codes == [200, 200, 403], format!("scalping statuses {codes:?}"))?;
        ensure(stub.count() == 2, format!("upstream saw {} purchase requests", stub.count()))?;
        let body: serde_json::Value = serde_json::from_slice(&statuses[2].1).map_err(|e| e.to_string())?;
        ensure(body["deciding_policy"] == "PurchaseLimit", format!("deny body {body}"))?;
        ensure(body["trace_id"].is_string() && body["reasons"].is_array(), format!("deny body {body}"))?;
        proxy.shutdown().await;

        let stub = StubUpstream::start(StubOptions::default()).await.unwrap();
        let proxy = start_proxy(stub.addr(), PolicyConfig::default()).await;
        let mut codes = Vec::new();
        for _ in 0..6 {
            codes.push(call(proxy.addr, &login()).await.0);
        }
        ensure(codes == [200, 200, 200, 200, 200, 403], format!("login statuses {codes:?}"))?;
        ensure(stub.count() == 5, format!("upstream saw {} logins", stub.count()))?;
        proxy.shutdown().await;
        Ok("scalping: 200 200 403 with 2 upstream requests; stuffing: 6th login 403 with 5 upstream".to_string())
    })
}

// ---- 6 -------------------------------------------------------------------

fn c6_extraction() -> Outcome_ {
    let tx = default_taxonomy();
    let syn = default_synonyms();
    let mut out = Vec::new();
    for (target, want) in [("/feed/list?count=10", "10"), ("/commentThreads?part=7&maxResults=30", "30")] {
        let r = req(&format!("GET {target} HTTP/1.1\r\nHost: h\r\n\r\n"), "127.0.0.1");
        let tags = OracleTagger.tag(&r, &tx).map_err(|e| e.to_string())?;
        ensure(tags.contains("ResponseDataLimit"), format!("{target}: tags {tags}"))?;
        let d = extract_tag_params(&tags, &r, &syn, &tx);
        ensure(
            d.variables.get("num_records").map(String::as_str) == Some(want),
            format!("{target}: variables {:?}", d.variables),
        )?;
        ensure(
            !d.param_names.values().any(|n| n == "part") && !d.variables.values().any(|v| v == "7"),
            format!("{target}: part was extracted: {:?}", d.param_names),
        )?;
        out.push(format!("{target} -> num_records={want}"));
    }
    Ok(out.join("; "))
}

// ---- 7 -------------------------------------------------------------------

/// Returns the prediction stored for the request path `/r/<index>`.
struct Replayed(Vec<Vec<String>>);

impl Tagger for Replayed {
    fn tag(&self, r: &ParsedRequest, _: &Taxonomy) -> Result<TagSet, InferenceError> {
        let i: usize = r.path.trim_start_matches("/r/").parse().unwrap();
        Ok(TagSet::new(self.0[i].iter().cloned(), TagSource::Llm))
    }
}

fn c7_metrics() -> Outcome_ {
    let f = std::fs::read(fixture("predictions.jsonl")).map_err(|e| e.to_string())?;
    let recs = read_predictions(f.as_slice()).map_err(|e| e.to_string())?;
    let tx = default_taxonomy();
    let corpus: Vec<LabeledRequest> = recs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let raw = format!("GET /r/{i} HTTP/1.1\r\nHost: h\r\n\r\n");
            LabeledRequest {
                request: req(&raw, "192.0.2.1"),
                raw,
                ground_truth: TagSet::new(p.truth.iter().cloned(), TagSource::Oracle),
                expected_variables: None,
                app: "crafted".into(),
            }
        })
        .collect();
    let tagger = Replayed(recs.iter().map(|p| p.predicted.clone()).collect());
    let report = run_eval(&corpus, &tagger, &tx, &default_synonyms(), EvalOptions::default()).map_err(|e| e.to_string())?;
    ensure(report == score_prediction_records(&recs, &tx), "run_eval and direct scoring disagree")?;

    let login = report.tag("Login").ok_or("no Login row")?;
    ensure(
        (login.counts.fp, login.counts.tn) == (1, 31),
        format!("Login FP/TN {:?}", (login.counts.fp, login.counts.tn)),
    )?;
    ensure(login.fpr == Some(0.03125), format!("Login FPR {:?}", login.fpr))?;
    ensure(login.tpr == Some(6.0 / 8.0), format!("Login TPR {:?}", login.tpr))?;
    let rdl = report.tag("ResponseDataLimit").ok_or("no ResponseDataLimit row")?;
    ensure(rdl.fpr == Some(2.0 / 36.0), format!("ResponseDataLimit FPR {:?}", rdl.fpr))?;
    ensure(rdl.tpr == Some(3.0 / 4.0), format!("ResponseDataLimit TPR {:?}", rdl.tpr))?;
    ensure(report.accuracy == 34.0 / 40.0, format!("accuracy {}", report.accuracy))?;
    for m in &report.per_tag {
        ensure(m.counts.total() == 40, format!("{}: counts sum to {}", m.tag, m.counts.total()))?;
    }
    Ok("Login FPR 3.125% TPR 75%, ResponseDataLimit FPR 2/36 TPR 75%, accuracy 85%".into())
}

// ---- 8 -------------------------------------------------------------------

fn c8_latency(rt: &tokio::runtime::Runtime) -> Outcome_ {
    let corpus = load_corpus(&fixture("corpus.jsonl"), true).map_err(|e| e.to_string())?.records;
    let warm = BenchConfig {
        requests: 5000,
        ..BenchConfig::default()
    };
    let rows = rt
        .block_on(bench::run(&corpus, &[BenchMode::Direct, BenchMode::NoPolicy, BenchMode::PreCached], &warm))
        .map_err(|e| e.to_string())?;
    let median = |m: BenchMode| rows.iter().find(|r| r.mode == m).unwrap().stats.median_us;
    let (direct, nopolicy, pre) = (median(BenchMode::Direct), median(BenchMode::NoPolicy), median(BenchMode::PreCached));
    let added = (pre - direct) / direct;
    let over_nopolicy = (pre - nopolicy) / nopolicy;

    let ordering = BenchConfig {
        requests: 1000,
        tagger: BenchTagger::Transcript {
            latency: Duration::from_millis(1),
        },
        ..BenchConfig::default()
    };
    let modes = [BenchMode::NoPolicy, BenchMode::PreCached, BenchMode::RuntimeCache, BenchMode::NoCache];
    let rows2 = rt.block_on(bench::run(&corpus, &modes, &ordering)).map_err(|e| e.to_string())?;
    let means: Vec<f64> = rows2.iter().map(|r| r.stats.mean_us).collect();
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);

    let detail = format!(
        "medians direct {direct:.0}us, no-policy proxy {nopolicy:.0}us, pre-cached {pre:.0}us; \
         added over direct {:.0}% (limit 20%), over no-policy proxy {:.0}%; \
         transcript means NoPolicy/PreCached/RuntimeCache/NoCache {:.0}/{:.0}/{:.0}/{:.0}us",
        added * 100.0,
        over_nopolicy * 100.0,
        means[0],
        means[1],
        means[2],
        means[3],
    );
    ensure(monotone, format!("mean ordering broken: {detail}"))?;
    ensure(added <= 0.20, detail.clone())?;
    Ok(detail)
}

// ---- 9 -------------------------------------------------------------------

/// Answers every prompt with the same text.
struct Fixed(String);

impl InferenceClient for Fixed {
    fn complete(&self, _: &PromptText) -> Result<String, InferenceError> {
        Ok(self.0.clone())
    }
}

fn run_props<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn pool_request(i: usize) -> String {
    match i {
        0 => purchase(4),
        1 => purchase(1),
        2 => login(),
        3 => "GET /feed/list?count=500 HTTP/1.1\r\nHost: h\r\n\r\n".into(),
        4 => "GET /feed/list?count=5 HTTP/1.1\r\nHost: h\r\n\r\n".into(),
        5 => "GET /static/logo.png HTTP/1.1\r\nHost: h\r\n\r\n".into(),
        _ => "POST /users HTTP/1.1\r\nHost: h\r\nContent-Type: application/json\r\nContent-Length: 2\r\n\r\n{}".into(),
    }
}

fn c9_invariants(rt: &tokio::runtime::Runtime) -> Outcome_ {
    // {None} exclusivity for whatever the model answers
    run_props(200, "(classes: \\[[0-9, ]{0,12}\\]|[ -~]{0,30})", |text| {
        let built = from_client(Arc::new(Fixed(text)), PromptMode::Single);
        let p = Pipeline::new(Arc::new(default_taxonomy()), Arc::new(default_synonyms()), built.tagger);
        let o = p.process_at(&req(&purchase(2), "10.1.1.1"), Timestamp(1));
        let t = &o.detail.tags;
        prop_assert!(!t.is_empty());
        prop_assert!(!t.contains(NONE) || t.len() == 1);
        Ok(())
    })
    .map_err(|e| format!("None exclusivity: {e}"))?;

    // short-circuit traces: handlers run in stage order and stop at the
    // first failure
    let stage = prop_oneof![Just(0u8), Just(1u8), Just(2u8)];
    run_props(200, prop::collection::vec((stage, any::<bool>()), 0..8), |handlers| {
        let trace = Arc::new(Mutex::new(Vec::new()));
        let mut chain = PolicyChain::empty();
        for (i, (stage, pass)) in handlers.iter().enumerate() {
            let name = format!("h{i}");
            let (t, n, pass) = (trace.clone(), name.clone(), *pass);
            let p = policy_fn(&name, move |_| {
                t.lock().unwrap().push(n.clone());
                if pass {
                    Check::pass()
                } else {
                    Check::fail("no")
                }
            });
            match stage {
                0 => chain.pre(p),
                1 => chain.on_tag("Login", p),
                _ => chain.post(p),
            };
        }
        let mut order: Vec<usize> = (0..handlers.len()).collect();
        order.sort_by_key(|&i| (handlers[i].0, i));
        let cut = order.iter().position(|&i| !handlers[i].1);
        let expected: Vec<String> = order[..cut.map_or(order.len(), |c| c + 1)]
            .iter()
            .map(|i| format!("h{i}"))
            .collect();
        let p = oracle_pipeline(PolicyConfig::default()).with_chain(chain);
        let d = p.process_at(&req(&login(), "10.2.2.2"), Timestamp(1)).decision;
        prop_assert_eq!(&*trace.lock().unwrap(), &expected);
        prop_assert_eq!(d.deciding_policy, cut.map(|c| format!("h{}", order[c])));
        Ok(())
    })
    .map_err(|e| format!("short-circuit trace: {e}"))?;

    // no fabricated variable values
    let name = prop::sample::select(vec!["count", "limit", "qty", "quantity", "sku", "item", "user", "email", "x", "part"]);
    run_props(200, prop::collection::vec((name, "[a-z0-9]{1,5}"), 0..6), |params| {
        let q: Vec<String> = params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let r = req(&format!("GET /checkout/cart?{} HTTP/1.1\r\nHost: h\r\n\r\n", q.join("&")), "10.3.3.3");
        let o = oracle_pipeline(PolicyConfig::default()).process_at(&r, Timestamp(1));
        let merged = r.merged_params();
        for (var, value) in &o.detail.variables {
            let pname = o.detail.param_names.get(var).expect("every value has a parameter name");
            prop_assert_eq!(merged.get(pname.as_str()).copied(), Some(value.as_str()));
        }
        Ok(())
    })
    .map_err(|e| format!("fabricated value: {e}"))?;

    // Deny never reaches the upstream
    let denied = AtomicU64::new(0);
    let sent = AtomicU64::new(0);
    run_props(24, prop::collection::vec(0usize..7, 1..30), |seq| {
        rt.block_on(async {
            let stub = StubUpstream::start(StubOptions::default()).await.unwrap();
            let proxy = start_proxy(stub.addr(), PolicyConfig::default()).await;
            for i in seq {
                let before = stub.count();
                let (status, _) = call(proxy.addr, &pool_request(i)).await;
                let after = stub.count();
                sent.fetch_add(1, Ordering::Relaxed);
                if status == 403 {
                    denied.fetch_add(1, Ordering::Relaxed);
                    prop_assert_eq!(after, before, "denied request reached the upstream");
                } else {
                    prop_assert_eq!(after, before + 1);
                }
            }
            proxy.shutdown().await;
            Ok(())
        })
    })
    .map_err(|e| format!("deny forwarded: {e}"))?;
    let (denied, sent) = (denied.into_inner(), sent.into_inner());
    ensure(denied > 0, "no request was denied")?;
    Ok(format!(
        "None exclusivity, short-circuit traces and no fabricated values over 200 cases each; \
         {denied} of {sent} proxied requests denied, none forwarded"
    ))
}
