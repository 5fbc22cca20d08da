//! Remote aggregation against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kp_core::aggregator::{build_prompt, EndpointConfig, SidecarCache};
use kp_core::corpus::{Question, TeacherRationale};
use kp_core::{Aggregator, Error, ExampleBank, RemoteAggregator};

struct Request {
    auth: Option<String>,
    body: serde_json::Value,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

#[derive(Default)]
struct Stats {
    hits: AtomicUsize,
    live: AtomicUsize,
    peak: AtomicUsize,
    auth: Mutex<Vec<Option<String>>>,
}

/// Serve until the test process exits. Returns the endpoint URL.
fn serve(handler: Arc<Handler>, delay: Duration) -> (String, Arc<Stats>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/complete", listener.local_addr().unwrap());
    let stats = Arc::new(Stats::default());
    let s = stats.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let (h, s) = (handler.clone(), s.clone());
            thread::spawn(move || handle(stream, &*h, &s, delay));
        }
    });
    (url, stats)
}

fn handle(stream: TcpStream, handler: &Handler, stats: &Stats, delay: Duration) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap(),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let req = Request {
        auth,
        body: serde_json::from_slice(&body).unwrap(),
    };
    stats.hits.fetch_add(1, Ordering::SeqCst);
    stats.auth.lock().unwrap().push(req.auth.clone());
    let now = stats.live.fetch_add(1, Ordering::SeqCst) + 1;
    stats.peak.fetch_max(now, Ordering::SeqCst);
    thread::sleep(delay);
    let (status, payload) = handler(&req);
    stats.live.fetch_sub(1, Ordering::SeqCst);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn endpoint(url: String) -> EndpointConfig {
    EndpointConfig {
        base_url: url,
        token_env: None,
        timeout_secs: 10.0,
        backoff_ms: 1,
        ..Default::default()
    }
}

fn question(id: &str) -> Question {
    Question {
        id: id.into(),
        dataset_id: "d".into(),
        text: format!("what is {id}"),
        options: vec!["x".into(), "y".into()],
        gold_index: 0,
        split: None,
    }
}

fn rationales(id: &str) -> Vec<TeacherRationale> {
    (0..2)
        .map(|t| TeacherRationale {
            question_id: id.into(),
            teacher_id: format!("t{t}"),
            rationale_text: format!("because {t}"),
            predicted_index: t,
            token_count: 2,
        })
        .collect()
}

fn echo() -> Arc<Handler> {
    Arc::new(|r: &Request| {
        let text = r.body["prompt"].as_str().unwrap().to_string();
        (200, serde_json::json!({ "text": text }).to_string())
    })
}

#[test]
fn echo_returns_the_rendered_prompt() {
    let (url, stats) = serve(echo(), Duration::ZERO);
    let agg = RemoteAggregator::new(endpoint(url), ExampleBank::toy(), 4);
    let q = question("q1");
    let rs = rationales("q1");
    let refs: Vec<&TeacherRationale> = rs.iter().collect();
    let got = agg.aggregate(&q, &refs).unwrap();
    let want = build_prompt(&agg.bank, &agg.instruction, &q, &refs, 4).unwrap().render();
    assert_eq!(got, want);
    assert_eq!(stats.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn bearer_token_comes_from_the_named_variable() {
    let (url, stats) = serve(echo(), Duration::ZERO);
    std::env::set_var("KP_STUB_TEST_TOKEN", "s3cret");
    let ep = EndpointConfig {
        token_env: Some("KP_STUB_TEST_TOKEN".into()),
        ..endpoint(url)
    };
    let agg = RemoteAggregator::new(ep, ExampleBank::toy(), 0);
    let rs = rationales("q");
    agg.aggregate(&question("q"), &rs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(
        stats.auth.lock().unwrap().as_slice(),
        &[Some("Bearer s3cret".to_string())]
    );
}

#[test]
fn three_server_errors_exhaust_retries() {
    let (url, stats) = serve(Arc::new(|_: &Request| (500, "{}".into())), Duration::ZERO);
    let agg = RemoteAggregator::new(endpoint(url), ExampleBank::toy(), 0);
    let rs = rationales("q");
    let err = agg
        .aggregate(&question("q"), &rs.iter().collect::<Vec<_>>())
        .unwrap_err();
    assert!(matches!(err, Error::RetriesExhausted { attempts: 3, .. }), "{err}");
    assert!(err.is_remote());
    assert_eq!(stats.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn recovers_after_transient_failures() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let handler: Arc<Handler> = Arc::new(move |_: &Request| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{}".into())
        } else {
            (200, r#"{"text": "merged"}"#.into())
        }
    });
    let (url, _) = serve(handler, Duration::ZERO);
    let agg = RemoteAggregator::new(endpoint(url), ExampleBank::toy(), 0);
    let rs = rationales("q");
    let got = agg.aggregate(&question("q"), &rs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(got, "merged");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, stats) = serve(Arc::new(|_: &Request| (400, "{}".into())), Duration::ZERO);
    let agg = RemoteAggregator::new(endpoint(url), ExampleBank::toy(), 0);
    let rs = rationales("q");
    let err = agg
        .aggregate(&question("q"), &rs.iter().collect::<Vec<_>>())
        .unwrap_err();
    assert!(matches!(err, Error::Http(400)), "{err}");
    assert_eq!(stats.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn concurrency_is_capped_and_order_kept() {
    let (url, stats) = serve(echo(), Duration::from_millis(60));
    let ep = EndpointConfig {
        max_concurrency: 2,
        ..endpoint(url)
    };
    let agg = RemoteAggregator::new(ep, ExampleBank::toy(), 0);
    let qs: Vec<Question> = (0..8).map(|i| question(&format!("q{i}"))).collect();
    let rs: Vec<Vec<TeacherRationale>> = qs.iter().map(|q| rationales(&q.id)).collect();
    let items: Vec<(&Question, Vec<&TeacherRationale>)> = qs
        .iter()
        .zip(&rs)
        .map(|(q, r)| (q, r.iter().collect()))
        .collect();
    let out = agg.aggregate_many(&items);
    assert_eq!(out.len(), 8);
    for (q, text) in qs.iter().zip(&out) {
        assert!(text.as_ref().unwrap().contains(&q.text));
    }
    assert_eq!(stats.peak.load(Ordering::SeqCst), 2);
    assert_eq!(agg.peak_concurrency(), 2);
}

#[test]
fn cache_skips_the_network_on_rerun() {
    let (url, stats) = serve(echo(), Duration::ZERO);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let rs = rationales("q");
    let refs: Vec<&TeacherRationale> = rs.iter().collect();
    let first = RemoteAggregator::new(endpoint(url.clone()), ExampleBank::toy(), 0)
        .with_cache(SidecarCache::open(&path).unwrap())
        .aggregate(&question("q"), &refs)
        .unwrap();
    let second = RemoteAggregator::new(endpoint(url), ExampleBank::toy(), 0)
        .with_cache(SidecarCache::open(&path).unwrap())
        .aggregate(&question("q"), &refs)
        .unwrap();
    assert_eq!(first, second);
    assert_eq!(stats.hits.load(Ordering::SeqCst), 1);
}
