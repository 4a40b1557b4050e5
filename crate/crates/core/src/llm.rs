//! Chat-completion gateway: a remote OpenAI-compatible backend, a scripted
//! offline backend, and an in-flight limiter shared by all callers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{self, Backoff, PostError, RetryPolicy};
use crate::prompts::{PromptPurpose, PromptText};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("no scripted reply for {purpose} prompt {digest}")]
    ScriptMiss {
        purpose: PromptPurpose,
        digest: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("script {path}:{line}: {message}")]
    Script {
        path: String,
        line: usize,
        message: String,
    },
}

/// Sampling temperature used when a request does not override it.
pub fn default_temperature(purpose: PromptPurpose) -> f64 {
    match purpose {
        PromptPurpose::GenerateDialogue => 0.7,
        _ => 0.2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl CompletionRequest {
    pub fn new(prompt: PromptText, model_id: impl Into<String>) -> Self {
        Self {
            temperature: default_temperature(prompt.purpose()),
            prompt,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            model_id: model_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens < 1 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// Stable hex digest of (purpose, user text).
pub fn prompt_digest(prompt: &PromptText) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.purpose().as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(prompt.user().as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One line of a script file. Exactly one of `digest` or `pattern` is set;
/// pattern rules may be restricted to one purpose and may reference capture
/// groups (`$1`, `${name}`) in the reply.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<PromptPurpose>,
    pub reply: String,
}

impl ScriptEntry {
    pub fn for_prompt(prompt: &PromptText, reply: impl Into<String>) -> Self {
        Self {
            digest: Some(prompt_digest(prompt)),
            pattern: None,
            purpose: None,
            reply: reply.into(),
        }
    }

    pub fn rule(
        purpose: Option<PromptPurpose>,
        pattern: impl Into<String>,
        reply: impl Into<String>,
    ) -> Self {
        Self {
            digest: None,
            pattern: Some(pattern.into()),
            purpose,
            reply: reply.into(),
        }
    }
}

struct Rule {
    purpose: Option<PromptPurpose>,
    pattern: Regex,
    reply: String,
}

/// Offline backend replaying replies keyed by prompt digest, falling back to
/// ordered regex rules over the user text.
pub struct ScriptedBackend {
    by_digest: HashMap<String, String>,
    rules: Vec<Rule>,
    latency: Duration,
    calls: Mutex<Vec<String>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        let mut by_digest = HashMap::new();
        let mut rules = Vec::new();
        for (i, entry) in entries.into_iter().enumerate() {
            match (entry.digest, entry.pattern) {
                (Some(d), None) => {
                    by_digest.insert(d, entry.reply);
                }
                (None, Some(p)) => {
                    let pattern = Regex::new(&p).map_err(|e| GatewayError::Script {
                        path: "<memory>".into(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    rules.push(Rule {
                        purpose: entry.purpose,
                        pattern,
                        reply: entry.reply,
                    });
                }
                _ => {
                    return Err(GatewayError::Script {
                        path: "<memory>".into(),
                        line: i + 1,
                        message: "entry needs exactly one of digest or pattern".into(),
                    })
                }
            }
        }
        Ok(Self {
            by_digest,
            rules,
            latency: Duration::ZERO,
            calls: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        })
    }

    /// Loads a JSONL script file.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let err = |line: usize, message: String| GatewayError::Script {
            path: path.display().to_string(),
            line,
            message,
        };
        let file = File::open(path).map_err(|e| err(0, e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
            entries.push(entry);
        }
        Self::new(entries).map_err(|e| match e {
            GatewayError::Script { line, message, .. } => err(line, message),
            other => other,
        })
    }

    /// Sleeps this long inside every call, so tests can observe overlap.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    /// Digests of every prompt seen, in call order.
    pub fn call_log(&self) -> Vec<String> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    /// Highest number of simultaneously executing calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn lookup(&self, prompt: &PromptText) -> Option<String> {
        let digest = prompt_digest(prompt);
        if let Some(reply) = self.by_digest.get(&digest) {
            return Some(reply.clone());
        }
        self.rules
            .iter()
            .filter(|r| r.purpose.is_none_or(|p| p == prompt.purpose()))
            .find_map(|r| {
                r.pattern.captures(prompt.user()).map(|caps| {
                    let mut out = String::new();
                    caps.expand(&r.reply, &mut out);
                    out
                })
            })
    }
}

impl ChatBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let started = Instant::now();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let digest = prompt_digest(&request.prompt);
        self.calls
            .lock()
            .expect("call log poisoned")
            .push(digest.clone());
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let reply = self.lookup(&request.prompt);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        match reply {
            Some(text) => Ok(CompletionResult {
                text,
                backend_id: self.backend_id().to_string(),
                latency: started.elapsed(),
                attempt_count: 1,
            }),
            None => Err(GatewayError::ScriptMiss {
                purpose: request.prompt.purpose(),
                digest,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint_url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Backoff,
    pub api_key: Option<String>,
}

/// OpenAI-compatible chat-completions client.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    id: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            agent: http::build_agent(config.timeout),
            id: format!("remote:{}", config.endpoint_url),
            config,
        }
    }

    pub fn request_body(request: &CompletionRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.prompt.system().is_empty() {
            messages.push(json!({"role": "system", "content": request.prompt.system()}));
        }
        messages.push(json!({"role": "user", "content": request.prompt.user()}));
        json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

fn reply_text(value: &serde_json::Value) -> Option<String> {
    let choice = &value["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .map(str::to_string)
}

impl ChatBackend for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let started = Instant::now();
        let policy = RetryPolicy {
            max_retries: self.config.max_retries,
            backoff: self.config.backoff,
        };
        let (value, attempts) = http::post_json(
            &self.agent,
            &self.config.endpoint_url,
            self.config.api_key.as_deref(),
            &Self::request_body(request),
            &policy,
        )
        .map_err(|e| match e {
            PostError::Transport { attempts, message } => {
                GatewayError::Transport { attempts, message }
            }
            PostError::Rejected { status, body } => GatewayError::Request { status, body },
            PostError::Decode(m) => GatewayError::Decode(m),
        })?;
        let text = reply_text(&value)
            .ok_or_else(|| GatewayError::Decode(format!("no message text in {value}")))?;
        Ok(CompletionResult {
            text,
            backend_id: self.id.clone(),
            latency: started.elapsed(),
            attempt_count: attempts,
        })
    }
}

/// Counting semaphore.
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Shared entry point to a chat backend with a global in-flight bound.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
    max_in_flight: usize,
    model_id: String,
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        model_id: impl Into<String>,
        max_in_flight: usize,
    ) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Self {
            backend,
            limiter: Limiter::new(max_in_flight),
            max_in_flight,
            model_id: model_id.into(),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    /// Request for `prompt` with this gateway's model and purpose defaults.
    pub fn request(&self, prompt: PromptText) -> CompletionRequest {
        CompletionRequest::new(prompt, self.model_id.clone())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let _permit = self.limiter.acquire();
        self.backend.complete(request)
    }

    /// Shorthand for `complete(&request(prompt))`, returning only the text.
    pub fn ask(&self, prompt: PromptText) -> Result<String, GatewayError> {
        self.complete(&self.request(prompt)).map(|r| r.text)
    }

    /// Runs a batch with at most `max_in_flight` outstanding calls (and never
    /// more than the gateway bound). Results keep input order; failures stay
    /// in place.
    pub fn complete_many(
        &self,
        requests: &[CompletionRequest],
        max_in_flight: usize,
    ) -> Vec<Result<CompletionResult, GatewayError>> {
        run_bounded(requests, max_in_flight, |r| self.complete(r))
    }
}

/// Applies `f` to every item on at most `workers` threads, preserving order.
pub fn run_bounded<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                *slots[i].lock().expect("slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("slot poisoned")
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(text: &str) -> PromptText {
        PromptText::new("", text, PromptPurpose::Extract).unwrap()
    }

    #[test]
    fn scripted_echo_by_digest() {
        let p = prompt("dialogue one");
        let backend =
            ScriptedBackend::new(vec![ScriptEntry::for_prompt(&p, "1. Greet elders first.")])
                .unwrap();
        let gw = Gateway::new(Arc::new(backend), "m", 4);
        let r = gw.complete(&gw.request(p)).unwrap();
        assert_eq!(r.text, "1. Greet elders first.");
        assert_eq!(r.attempt_count, 1);
        assert_eq!(r.backend_id, "scripted");
    }

    #[test]
    fn scripted_miss_is_an_error() {
        let backend = ScriptedBackend::new(vec![]).unwrap();
        let gw = Gateway::new(Arc::new(backend), "m", 1);
        assert!(matches!(
            gw.complete(&gw.request(prompt("unknown"))),
            Err(GatewayError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn rules_respect_purpose_and_expand_captures() {
        let backend = ScriptedBackend::new(vec![
            ScriptEntry::rule(Some(PromptPurpose::Verify), "(?s).*", "yes"),
            ScriptEntry::rule(
                Some(PromptPurpose::Extract),
                r"A: (\S+)",
                "1. 关于$1的规范。",
            ),
        ])
        .unwrap();
        assert_eq!(
            backend.lookup(&prompt("A: 你好 B: 嗯")).as_deref(),
            Some("1. 关于你好的规范。")
        );
        let verify = PromptText::new("", "anything", PromptPurpose::Verify).unwrap();
        assert_eq!(backend.lookup(&verify).as_deref(), Some("yes"));
        let other = PromptText::new("", "anything", PromptPurpose::PredictFrame).unwrap();
        assert_eq!(backend.lookup(&other), None);
    }

    #[test]
    fn digest_depends_on_purpose_and_user_only() {
        let a = PromptText::new("sys a", "same", PromptPurpose::Extract).unwrap();
        let b = PromptText::new("sys b", "same", PromptPurpose::Extract).unwrap();
        let c = PromptText::new("sys a", "same", PromptPurpose::Verify).unwrap();
        assert_eq!(prompt_digest(&a), prompt_digest(&b));
        assert_ne!(prompt_digest(&a), prompt_digest(&c));
        assert_eq!(prompt_digest(&a).len(), 64);
    }

    #[test]
    fn invalid_temperature_is_rejected() {
        let backend = ScriptedBackend::new(vec![ScriptEntry::rule(None, ".*", "x")]).unwrap();
        let mut req = CompletionRequest::new(prompt("p"), "m");
        req.temperature = 2.5;
        assert!(matches!(
            backend.complete(&req),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert_eq!(
            CompletionRequest::new(
                PromptText::new("", "g", PromptPurpose::GenerateDialogue).unwrap(),
                "m"
            )
            .temperature,
            0.7
        );
    }

    fn batch(n: usize) -> (Vec<CompletionRequest>, Vec<ScriptEntry>) {
        let prompts: Vec<PromptText> = (0..n).map(|i| prompt(&format!("request {i}"))).collect();
        let entries = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| ScriptEntry::for_prompt(p, format!("reply {i}")))
            .collect();
        let reqs = prompts
            .into_iter()
            .map(|p| CompletionRequest::new(p, "m"))
            .collect();
        (reqs, entries)
    }

    #[test]
    fn batch_preserves_order_under_bound() {
        let (reqs, entries) = batch(10);
        let backend = Arc::new(
            ScriptedBackend::new(entries)
                .unwrap()
                .with_latency(Duration::from_millis(15)),
        );
        let gw = Gateway::new(backend.clone(), "m", 8);
        let out = gw.complete_many(&reqs, 3);
        assert_eq!(out.len(), 10);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("reply {i}"));
        }
        assert!(backend.peak_in_flight() <= 3);
        assert!(backend.peak_in_flight() >= 2, "expected overlap");
    }

    #[test]
    fn batch_failure_stays_in_place() {
        let (mut reqs, entries) = batch(10);
        reqs[4] = CompletionRequest::new(prompt("nobody scripted this"), "m");
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(entries).unwrap()), "m", 4);
        let out = gw.complete_many(&reqs, 4);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 9);
        assert!(matches!(out[4], Err(GatewayError::ScriptMiss { .. })));
    }

    #[test]
    fn single_slot_serializes_calls() {
        let (reqs, entries) = batch(6);
        let backend = Arc::new(
            ScriptedBackend::new(entries)
                .unwrap()
                .with_latency(Duration::from_millis(5)),
        );
        let gw = Gateway::new(backend.clone(), "m", 8);
        gw.complete_many(&reqs, 1);
        assert_eq!(backend.peak_in_flight(), 1);
        let expected: Vec<String> = reqs.iter().map(|r| prompt_digest(&r.prompt)).collect();
        assert_eq!(backend.call_log(), expected);
    }

    #[test]
    fn gateway_bound_caps_concurrent_callers() {
        let (reqs, entries) = batch(12);
        let backend = Arc::new(
            ScriptedBackend::new(entries)
                .unwrap()
                .with_latency(Duration::from_millis(10)),
        );
        let gw = Gateway::new(backend.clone(), "m", 2);
        let out = gw.complete_many(&reqs, 12);
        assert!(out.iter().all(Result::is_ok));
        assert!(backend.peak_in_flight() <= 2);
    }

    #[test]
    fn scripted_transcripts_are_repeatable() {
        let (reqs, entries) = batch(5);
        let run = || {
            let gw = Gateway::new(
                Arc::new(ScriptedBackend::new(entries.clone()).unwrap()),
                "m",
                3,
            );
            gw.complete_many(&reqs, 3)
                .into_iter()
                .map(|r| r.unwrap().text)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
