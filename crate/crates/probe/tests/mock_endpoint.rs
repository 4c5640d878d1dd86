use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use posbias_probe::{run_probe, Endpoint, EndpointConfig, ProbeError, ProbeItem, ProbeOptions, TranscriptRecord};
use serde_json::{json, Value};

type Answer = Box<dyn Fn(&str) -> String + Send + Sync>;

struct Mock {
    script: Mutex<VecDeque<u16>>,
    answer: Answer,
    delay: Duration,
    hits: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

async fn chat(State(m): State<Arc<Mock>>, Json(body): Json<Value>) -> Response {
    m.hits.fetch_add(1, Ordering::SeqCst);
    let now = m.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    m.peak.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(m.delay).await;
    m.in_flight.fetch_sub(1, Ordering::SeqCst);
    let scripted = m.script.lock().unwrap().pop_front();
    if let Some(code) = scripted.filter(|c| *c != 200) {
        return (StatusCode::from_u16(code).unwrap(), "scripted").into_response();
    }
    assert_eq!(body["messages"][0]["role"], "user");
    let prompt = body["messages"][0]["content"].as_str().unwrap();
    let text = (m.answer)(prompt);
    Json(json!({"choices": [{"message": {"role": "assistant", "content": text}}]})).into_response()
}

async fn serve(script: &[u16], delay_ms: u64, answer: Answer) -> (String, Arc<Mock>) {
    let mock = Arc::new(Mock {
        script: Mutex::new(script.iter().copied().collect()),
        answer,
        delay: Duration::from_millis(delay_ms),
        hits: AtomicUsize::new(0),
        in_flight: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(mock.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), mock)
}

fn endpoint(url: &str, retries: u32, in_flight: usize) -> Endpoint {
    let mut cfg = EndpointConfig::new(url, "mock-model");
    cfg.max_retries = retries;
    cfg.max_in_flight = in_flight;
    cfg.backoff_ms = 2;
    cfg.timeout_secs = 10.0;
    Endpoint::new(cfg).unwrap()
}

fn tagged(truth: usize, j: usize) -> String {
    format!("truth={truth} idx={j}\nWhich one?")
}

fn tags(prompt: &str) -> (usize, usize) {
    let line = prompt.lines().next().unwrap();
    let mut it = line.split(' ').map(|kv| kv.split('=').nth(1).unwrap().parse::<usize>().unwrap());
    (it.next().unwrap(), it.next().unwrap())
}

#[tokio::test]
async fn passthrough() {
    let (url, _) = serve(&[], 0, Box::new(|_| "hello there".into())).await;
    let c = endpoint(&url, 3, 1).chat_complete("hi").await.unwrap();
    assert_eq!(c.text, "hello there");
    assert_eq!(c.attempts, 1);
}

#[tokio::test]
async fn rate_limit_then_success_retries_once() {
    let (url, mock) = serve(&[429, 200], 0, Box::new(|_| "ok".into())).await;
    let c = endpoint(&url, 3, 1).chat_complete("hi").await.unwrap();
    assert_eq!(c.attempts, 2);
    assert_eq!(mock.hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn server_errors_exhaust_retries() {
    let (url, mock) = serve(&[500; 5], 0, Box::new(|_| "ok".into())).await;
    let err = endpoint(&url, 3, 1).chat_complete("hi").await.unwrap_err();
    assert!(matches!(err, ProbeError::Exhausted { attempts: 4, last: 500 }), "{err}");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let (url, mock) = serve(&[400, 200], 0, Box::new(|_| "ok".into())).await;
    let err = endpoint(&url, 3, 1).chat_complete("hi").await.unwrap_err();
    assert!(matches!(err, ProbeError::Status { status: 400, .. }));
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn malformed_body_and_timeout() {
    let app = Router::new().route("/v1/chat/completions", post(|| async { Json(json!({"nope": 1})) }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let err = endpoint(&format!("http://{addr}/v1"), 0, 1).chat_complete("hi").await.unwrap_err();
    assert!(matches!(err, ProbeError::Malformed(_)));

    let (url, _) = serve(&[], 800, Box::new(|_| "late".into())).await;
    let mut cfg = EndpointConfig::new(url, "m");
    cfg.timeout_secs = 0.1;
    let err = Endpoint::new(cfg).unwrap().chat_complete("hi").await.unwrap_err();
    assert!(matches!(err, ProbeError::Timeout), "{err}");
}

#[tokio::test]
async fn planted_table_is_reproduced() {
    let k = 5;
    let n = 12;
    // deterministic answer per (truth, idx); column k means unparseable
    let plant = move |c: usize, j: usize| (c * 7 + j * j * 3) % (k + 1);
    let (url, mock) = serve(
        &[],
        1,
        Box::new(move |p| {
            let (c, j) = tags(p);
            match plant(c, j) {
                a if a == k => "no idea".to_string(),
                a => format!("Potential Product [{}]", a + 1),
            }
        }),
    )
    .await;
    let items: Vec<ProbeItem> =
        (1..=k).flat_map(|c| (0..n).map(move |j| ProbeItem { truth_slot: c, prompt: tagged(c, j) })).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = ProbeOptions::new(k);
    opts.transcript = Some(dir.path().join("t.jsonl"));
    let report = run_probe(&endpoint(&url, 0, 3), &items, &opts).await.unwrap();

    let mut expected = vec![vec![0u64; k + 1]; k];
    for c in 1..=k {
        for j in 0..n {
            expected[c - 1][plant(c, j)] += 1;
        }
    }
    assert_eq!(report.counts, expected);
    assert_eq!(report.slots, (1..=k).collect::<Vec<_>>());
    assert_eq!(mock.hits.load(Ordering::SeqCst), k * n);

    let lines: Vec<TranscriptRecord> = std::fs::read_to_string(dir.path().join("t.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), items.len());
    for (i, r) in lines.iter().enumerate() {
        assert_eq!(r.index, i);
        assert_eq!(r.prompt, items[i].prompt);
    }
}

#[tokio::test]
async fn oracle_and_constant_answers() {
    let k = 6;
    let items: Vec<ProbeItem> =
        (1..=k).flat_map(|c| (0..5).map(move |j| ProbeItem { truth_slot: c, prompt: tagged(c, j) })).collect();

    let (url, _) = serve(&[], 0, Box::new(|p| format!("Potential Product [{}]", tags(p).0))).await;
    let r = run_probe(&endpoint(&url, 0, 4), &items, &ProbeOptions::new(k)).await.unwrap();
    assert_eq!(r.accuracy, vec![1.0; k]);
    assert_eq!(r.fluctuation, Some(0.0));

    let (url, _) = serve(&[], 0, Box::new(|_| "[1]".into())).await;
    let r = run_probe(&endpoint(&url, 0, 4), &items, &ProbeOptions::new(k)).await.unwrap();
    assert!((r.fluctuation.unwrap() - 244.95).abs() < 0.01, "{:?}", r.fluctuation);
}

#[tokio::test]
async fn in_flight_bound_is_respected() {
    let (url, mock) = serve(&[], 20, Box::new(|_| "[1]".into())).await;
    let items: Vec<ProbeItem> = (0..24).map(|j| ProbeItem { truth_slot: 1 + j % 3, prompt: tagged(1, j) }).collect();
    run_probe(&endpoint(&url, 0, 3), &items, &ProbeOptions::new(3)).await.unwrap();
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak {peak}");
    assert!(peak >= 2, "no concurrency observed, peak {peak}");
}

#[tokio::test]
async fn failures_land_in_invalid_column() {
    let (url, _) = serve(&[503, 503], 0, Box::new(|_| "[2]".into())).await;
    let items = vec![ProbeItem { truth_slot: 2, prompt: tagged(2, 0) }, ProbeItem { truth_slot: 2, prompt: tagged(2, 1) }];
    // one request at a time so the scripted failures hit the first item
    let r = run_probe(&endpoint(&url, 1, 1), &items, &ProbeOptions::new(3)).await.unwrap();
    assert_eq!(r.counts, vec![vec![0, 1, 0, 1]]);
    assert!(r.flagged.is_empty());
}
