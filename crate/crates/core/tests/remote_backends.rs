//! Remote chat and embedding clients against a local stub HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use normforge::embeddings::{Embedder, RemoteEmbedder, RemoteEmbedderConfig};
use normforge::llm::{
    ChatBackend, CompletionRequest, Gateway, GatewayError, RemoteBackend, RemoteConfig,
};
use normforge::prompts::{PromptPurpose, PromptText};
use normforge::Backoff;
use serde_json::{json, Value};

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<(String, Value)>>>,
}

/// Serves `statuses` in order (repeating the last one), answering 200s with
/// `ok_body`.
fn stub(statuses: Vec<u16>, ok_body: Value, delay: Duration) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, p, b) = (hits.clone(), peak.clone(), bodies.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let n = h.fetch_add(1, Ordering::SeqCst);
            let status = *statuses.get(n).or(statuses.last()).unwrap();
            let (active, peak, bodies, ok_body) =
                (active.clone(), p.clone(), b.clone(), ok_body.clone());
            thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                serve(stream, status, &ok_body, delay, &bodies);
                active.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Stub {
        url,
        hits,
        peak,
        bodies,
    }
}

fn serve(
    stream: TcpStream,
    status: u16,
    ok_body: &Value,
    delay: Duration,
    bodies: &Mutex<Vec<(String, Value)>>,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut length = 0;
    let mut auth = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            auth = line["authorization:".len()..].trim().to_string();
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    bodies
        .lock()
        .unwrap()
        .push((auth, serde_json::from_slice(&body).unwrap_or(Value::Null)));
    thread::sleep(delay);
    let payload = if status == 200 {
        ok_body.to_string()
    } else {
        json!({"error": "stub"}).to_string()
    };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn chat_reply(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
}

fn remote(url: &str, max_retries: u32) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        endpoint_url: url.to_string(),
        timeout: Duration::from_secs(5),
        max_retries,
        backoff: Backoff {
            base: Duration::from_millis(5),
            max: Duration::from_millis(20),
        },
        api_key: Some("secret-token".into()),
    })
}

fn request(text: &str) -> CompletionRequest {
    let prompt = PromptText::new("sys", text, PromptPurpose::Verify).unwrap();
    CompletionRequest::new(prompt, "stub-model")
}

#[test]
fn rate_limited_twice_then_success_takes_three_attempts() {
    let s = stub(vec![429, 429, 200], chat_reply("yes"), Duration::ZERO);
    let r = remote(&s.url, 4).complete(&request("hello")).unwrap();
    assert_eq!(r.text, "yes");
    assert_eq!(r.attempt_count, 3);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
    let bodies = s.bodies.lock().unwrap();
    let (auth, body) = &bodies[0];
    assert_eq!(auth, "Bearer secret-token");
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["messages"][0]["role"], "system");
}

#[test]
fn client_errors_are_not_retried() {
    let s = stub(vec![400], chat_reply("unused"), Duration::ZERO);
    let err = remote(&s.url, 4).complete(&request("x")).unwrap_err();
    assert!(
        matches!(err, GatewayError::Request { status: 400, .. }),
        "{err:?}"
    );
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn exhausted_retries_report_attempts() {
    let s = stub(vec![503], chat_reply("unused"), Duration::ZERO);
    let err = remote(&s.url, 2).complete(&request("x")).unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = remote(&format!("http://127.0.0.1:{port}/x"), 1)
        .complete(&request("x"))
        .unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn gateway_bounds_concurrent_remote_requests() {
    let s = stub(vec![200], chat_reply("ok"), Duration::from_millis(40));
    let gw = Gateway::new(Arc::new(remote(&s.url, 0)), "stub-model", 3);
    let reqs: Vec<_> = (0..12).map(|i| request(&format!("q{i}"))).collect();
    let out = gw.complete_many(&reqs, 12);
    assert!(out.iter().all(|r| r.as_ref().unwrap().text == "ok"));
    assert_eq!(s.hits.load(Ordering::SeqCst), 12);
    let peak = s.peak.load(Ordering::SeqCst);
    assert!((2..=3).contains(&peak), "peak {peak}");
}

#[test]
fn remote_embedder_normalizes_and_checks_dimension() {
    let s = stub(
        vec![500, 200],
        json!({"data": [{"embedding": [3.0, 4.0, 0.0]}]}),
        Duration::ZERO,
    );
    let cfg = |dimension| RemoteEmbedderConfig {
        endpoint_url: s.url.clone(),
        model_id: "embed-stub".into(),
        dimension,
        timeout: Duration::from_secs(5),
        max_retries: 3,
        api_key: None,
    };
    let e = RemoteEmbedder::new(cfg(3));
    let v = e.embed("文本").unwrap();
    assert_eq!(v.values(), &[0.6, 0.8, 0.0]);
    assert_eq!(v.provider_id(), e.provider_id());
    let bodies = s.bodies.lock().unwrap().clone();
    assert_eq!(
        bodies.last().unwrap().1,
        json!({"model": "embed-stub", "input": ["文本"]})
    );
    assert!(RemoteEmbedder::new(cfg(4)).embed("文本").is_err());
}
