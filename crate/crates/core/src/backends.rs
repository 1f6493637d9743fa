//! Model-service clients: chat, embedding and pair scoring.
//!
//! Each capability has one generic HTTP JSON contract:
//!
//! * chat: `{messages: [{role, content, images?}], params}` → `{text}`
//! * embed: `{texts}` → `{vectors}`
//! * score: `{query, passages}` → `{scores}`
//!
//! API keys are read from the environment variable named by
//! [`BackendConfig::api_key_var`], never from config files. Mocks implement
//! the same traits and are pure functions of their inputs and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::text::{stable_hash64, tokenize};

/// Dimension every embedding provider must return.
pub const EMBEDDING_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_new_tokens: u32,
    pub sampling: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_p: 0.95,
            top_k: 64,
            max_new_tokens: 100,
            sampling: true,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Short name; also determines the default `<NAME>_API_KEY` variable.
    pub name: String,
    pub endpoint: String,
    /// Overrides the default API key variable name.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Base delay for exponential backoff between attempts.
    pub backoff_ms: u64,
    pub model: String,
    pub max_concurrent: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            name: "chat".into(),
            endpoint: String::new(),
            api_key_env: None,
            timeout_secs: 60.0,
            retries: 2,
            backoff_ms: 500,
            model: String::new(),
            max_concurrent: 4,
        }
    }
}

impl BackendConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn api_key_var(&self) -> String {
        self.api_key_env.clone().unwrap_or_else(|| {
            let upper: String = self
                .name
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_uppercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            format!("{upper}_API_KEY")
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config(format!("{}: timeout must be > 0", self.name)));
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config(format!("{}: max_concurrent must be >= 1", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
            images: Vec::new(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
            images: Vec::new(),
        }
    }
}

/// A chat call. `stage` and `fixture_keys` are routing metadata for mocks
/// and logs; they are not part of the wire payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub stage: String,
    /// Most specific first; mocks fall back to `"*"` after these.
    pub fixture_keys: Vec<String>,
    pub messages: Vec<Message>,
    pub image_attachments: Vec<PathBuf>,
    pub params: GenerationParams,
}

impl ChatRequest {
    pub fn new(stage: &str, messages: Vec<Message>) -> Self {
        Self {
            stage: stage.into(),
            fixture_keys: Vec::new(),
            messages,
            image_attachments: Vec::new(),
            params: GenerationParams::default(),
        }
    }

    pub fn with_keys(mut self, keys: Vec<String>) -> Self {
        self.fixture_keys = keys;
        self
    }

    pub fn with_images(mut self, images: Vec<PathBuf>) -> Self {
        self.image_attachments = images;
        self
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    /// The JSON body sent to a chat endpoint. Attachments are base64-encoded
    /// onto the last user message.
    pub fn wire_body(&self) -> Result<Value> {
        let mut messages = self.messages.clone();
        if !self.image_attachments.is_empty() {
            let mut encoded = Vec::with_capacity(self.image_attachments.len());
            for path in &self.image_attachments {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                encoded.push(base64::engine::general_purpose::STANDARD.encode(bytes));
            }
            match messages.iter_mut().rev().find(|m| m.role == "user") {
                Some(last) => last.images.extend(encoded),
                None => messages.push(Message {
                    role: "user".into(),
                    content: String::new(),
                    images: encoded,
                }),
            }
        }
        Ok(json!({ "messages": messages, "params": self.params }))
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<String>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

pub trait PairScorer: Send + Sync {
    fn score_pairs(&self, query: &str, passages: &[String]) -> Result<Vec<f64>>;
}

/// A unit-norm vector of [`EMBEDDING_DIM`] components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps raw components and L2-normalizes them.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: EMBEDDING_DIM,
                actual: values.len(),
            });
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
            return Err(Error::Precondition(
                "cannot normalize a zero or non-finite vector".into(),
            ));
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Wraps components that are already normalized (e.g. loaded from disk).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Shape {
                expected: EMBEDDING_DIM,
                actual: values.len(),
            });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both operands are unit vectors so this is the dot
    /// product accumulated in f64.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

/// Replaces every occurrence of `secret` with `***`.
pub fn redact(text: &str, secret: Option<&str>) -> String {
    match secret {
        Some(s) if !s.is_empty() => text.replace(s, "***"),
        _ => text.to_string(),
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.available.notify_one();
    }
}

/// Shared HTTP plumbing: timeout, bounded retries with exponential backoff,
/// a concurrency limit, and redacted logging.
pub struct HttpTransport {
    config: BackendConfig,
    agent: ureq::Agent,
    limiter: Semaphore,
}

impl HttpTransport {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        if config.endpoint.is_empty() {
            return Err(Error::Config(format!("{}: endpoint is not configured", config.name)));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = Semaphore::new(config.max_concurrent);
        Ok(Self { config, agent, limiter })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(self.config.api_key_var()).ok().filter(|k| !k.is_empty())
    }

    fn attempt(&self, body: &Value, key: Option<&str>) -> std::result::Result<Value, String> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(format!("HTTP {}: {}", status.as_u16(), truncate(&text, 200)));
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| format!("invalid JSON response: {e}"))
    }

    /// POSTs `body`, retrying transport errors and non-success statuses.
    /// Total attempts are `retries + 1`.
    pub fn post_json(&self, body: &Value) -> Result<Value> {
        let _permit = self.limiter.acquire();
        let key = self.api_key();
        let mut attempts = Vec::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            log::debug!(
                "{} POST {} (attempt {}) body={} auth={}",
                self.config.name,
                self.config.endpoint,
                attempt + 1,
                truncate(&body.to_string(), 300),
                if key.is_some() { "Bearer ***" } else { "none" }
            );
            match self.attempt(body, key.as_deref()) {
                Ok(value) => return Ok(value),
                Err(message) => {
                    let message = redact(&message, key.as_deref());
                    log::warn!("{} attempt {} failed: {message}", self.config.name, attempt + 1);
                    attempts.push(format!("attempt {}: {message}", attempt + 1));
                }
            }
        }
        Err(Error::Backend {
            backend: self.config.name.clone(),
            attempts,
        })
    }
}

fn truncate(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        text.to_string()
    } else {
        let cut: String = text.chars().take(max).collect();
        format!("{cut}…")
    }
}

fn malformed(backend: &str, what: &str) -> Error {
    Error::format(format!("{backend} response"), what, "missing or mistyped")
}

pub struct HttpChatBackend {
    transport: HttpTransport,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        Ok(Self {
            transport: HttpTransport::new(config)?,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn name(&self) -> &str {
        &self.transport.config.name
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        request.params.validate()?;
        let mut body = request.wire_body()?;
        if !self.transport.config.model.is_empty() {
            body["model"] = Value::String(self.transport.config.model.clone());
        }
        let response = self.transport.post_json(&body)?;
        response
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(self.name(), "text"))
    }
}

pub struct HttpEmbeddingBackend {
    transport: HttpTransport,
}

impl HttpEmbeddingBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        Ok(Self {
            transport: HttpTransport::new(config)?,
        })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let name = self.transport.config.name.clone();
        let response = self.transport.post_json(&json!({ "texts": texts }))?;
        let vectors = response
            .get("vectors")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&name, "vectors"))?;
        if vectors.len() != texts.len() {
            return Err(Error::format(
                format!("{name} response"),
                "vectors",
                format!("expected {} vectors, got {}", texts.len(), vectors.len()),
            ));
        }
        vectors
            .iter()
            .map(|v| {
                let components = v
                    .as_array()
                    .ok_or_else(|| malformed(&name, "vectors[]"))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| malformed(&name, "vectors[][]"))
                    })
                    .collect::<Result<Vec<f32>>>()?;
                EmbeddingVector::normalized(components)
            })
            .collect()
    }
}

pub struct HttpPairScorer {
    transport: HttpTransport,
}

impl HttpPairScorer {
    pub fn new(config: BackendConfig) -> Result<Self> {
        Ok(Self {
            transport: HttpTransport::new(config)?,
        })
    }
}

impl PairScorer for HttpPairScorer {
    fn score_pairs(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        let name = self.transport.config.name.clone();
        let response = self
            .transport
            .post_json(&json!({ "query": query, "passages": passages }))?;
        let scores: Vec<f64> = response
            .get("scores")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&name, "scores"))?
            .iter()
            .map(|s| s.as_f64().ok_or_else(|| malformed(&name, "scores[]")))
            .collect::<Result<_>>()?;
        if scores.len() != passages.len() {
            return Err(Error::format(
                format!("{name} response"),
                "scores",
                format!("expected {} scores, got {}", passages.len(), scores.len()),
            ));
        }
        Ok(scores)
    }
}

/// Canned chat responses keyed by stage, then fixture key.
///
/// A response that is a JSON string is returned verbatim; any other JSON
/// value is returned as compact JSON text. An object of the form
/// `{"$error": "..."}` makes the call fail, for fault injection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixtures(pub BTreeMap<String, BTreeMap<String, Value>>);

impl MockFixtures {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), "<root>", e.to_string()))
    }

    pub fn insert(&mut self, stage: &str, key: &str, response: Value) {
        self.0
            .entry(stage.to_string())
            .or_default()
            .insert(key.to_string(), response);
    }

    pub fn with(mut self, stage: &str, key: &str, response: Value) -> Self {
        self.insert(stage, key, response);
        self
    }

    fn lookup(&self, request: &ChatRequest) -> Option<&Value> {
        let stage = self.0.get(&request.stage)?;
        request
            .fixture_keys
            .iter()
            .map(String::as_str)
            .chain(std::iter::once("*"))
            .find_map(|key| stage.get(key))
    }
}

/// Fixture-driven chat backend with call counting.
#[derive(Debug, Default)]
pub struct MockChatBackend {
    fixtures: MockFixtures,
    calls: AtomicUsize,
    stage_calls: Mutex<BTreeMap<String, usize>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockChatBackend {
    pub fn new(fixtures: MockFixtures) -> Self {
        Self {
            fixtures,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn stage_calls(&self, stage: &str) -> usize {
        self.stage_calls
            .lock()
            .expect("mock poisoned")
            .get(stage)
            .copied()
            .unwrap_or(0)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock poisoned").clone()
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.stage_calls.lock().expect("mock poisoned").clear();
        self.requests.lock().expect("mock poisoned").clear();
    }
}

impl ChatBackend for MockChatBackend {
    fn name(&self) -> &str {
        "mock-chat"
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self
            .stage_calls
            .lock()
            .expect("mock poisoned")
            .entry(request.stage.clone())
            .or_default() += 1;
        self.requests.lock().expect("mock poisoned").push(request.clone());
        match self.fixtures.lookup(request) {
            Some(Value::String(text)) => Ok(text.clone()),
            Some(Value::Object(obj)) if obj.contains_key("$error") => Err(Error::backend(
                self.name(),
                obj["$error"].as_str().unwrap_or("scripted failure"),
            )),
            Some(other) => Ok(other.to_string()),
            None => Err(Error::backend(
                self.name(),
                format!(
                    "no fixture for stage `{}` keys {:?}",
                    request.stage, request.fixture_keys
                ),
            )),
        }
    }
}

/// Wraps a chat backend and fails every call after `budget` successful ones.
pub struct CallBudget {
    inner: Arc<dyn ChatBackend>,
    remaining: Mutex<usize>,
}

impl CallBudget {
    pub fn new(inner: Arc<dyn ChatBackend>, budget: usize) -> Self {
        Self {
            inner,
            remaining: Mutex::new(budget),
        }
    }
}

impl ChatBackend for CallBudget {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        {
            let mut remaining = self.remaining.lock().expect("budget poisoned");
            if *remaining == 0 {
                return Err(Error::backend(self.inner.name(), "call budget exhausted"));
            }
            *remaining -= 1;
        }
        self.inner.chat(request)
    }
}

/// Deterministic embedder: each token is hashed (with the seed) onto two
/// signed coordinates and the sum is normalized. Token-free text falls back
/// to a seeded pseudo-random unit vector derived from the whole string.
#[derive(Debug, Default)]
pub struct MockEmbedder {
    seed: u64,
    unavailable: bool,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// An embedder whose every call fails.
    pub fn unavailable() -> Self {
        Self {
            unavailable: true,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let seed = self.seed.to_string();
        let tokens = tokenize(text);
        let mut values = vec![0f32; EMBEDDING_DIM];
        if tokens.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&[&seed, "text", text]));
            for v in &mut values {
                *v = rng.random_range(-1.0f32..1.0);
            }
        } else {
            for token in &tokens {
                let h = stable_hash64(&[&seed, token]);
                for lane in 0..2 {
                    let bits = h >> (lane * 32);
                    let index = (bits as usize & 0xFFFF) % EMBEDDING_DIM;
                    let sign = if bits & 0x1_0000 == 0 { 1.0 } else { -1.0 };
                    values[index] += sign;
                }
            }
            if values.iter().all(|&v| v == 0.0) {
                values[(stable_hash64(&[&seed, text]) as usize) % EMBEDDING_DIM] = 1.0;
            }
        }
        EmbeddingVector::normalized(values).expect("mock vector is non-zero")
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.unavailable {
            return Err(Error::backend("mock-embed", "embedding service unavailable"));
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Overlap scorer: fraction of distinct query tokens present in the passage.
#[derive(Debug, Default)]
pub struct MockPairScorer {
    unavailable: bool,
    calls: AtomicUsize,
}

impl MockPairScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unavailable() -> Self {
        Self {
            unavailable: true,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn token_overlap(query: &str, passage: &str) -> f64 {
    let query_tokens: std::collections::BTreeSet<String> = tokenize(query).into_iter().collect();
    if query_tokens.is_empty() {
        return 0.0;
    }
    let passage_tokens: std::collections::HashSet<String> = tokenize(passage).into_iter().collect();
    let shared = query_tokens.iter().filter(|t| passage_tokens.contains(*t)).count();
    shared as f64 / query_tokens.len() as f64
}

impl PairScorer for MockPairScorer {
    fn score_pairs(&self, query: &str, passages: &[String]) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.unavailable {
            return Err(Error::backend("mock-score", "scoring service unavailable"));
        }
        Ok(passages.iter().map(|p| token_overlap(query, p)).collect())
    }
}
