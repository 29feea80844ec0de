//! Chat-completions client for VLM endpoints.
//!
//! [`VlmClient`] serializes transcripts to the multimodal chat-completions
//! wire format, bounds in-flight requests with a global permit count, and
//! retries transient failures with exponential backoff plus jitter. The
//! transport is a [`Backend`]: [`HttpBackend`] for real endpoints and
//! [`ScriptedStub`] for deterministic offline runs.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageRef;
use crate::prompting::{ChatMessage, Part, Role, Transcript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub parallelism: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Ask the server for `n` choices in one request instead of `n` requests.
    pub server_side_n: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 1.0,
            max_tokens: 1024,
            timeout_ms: 120_000,
            max_retries: 3,
            parallelism: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            server_side_n: false,
        }
    }
}

impl EndpointConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base: Duration::from_millis(self.backoff_base_ms),
            max: Duration::from_millis(self.backoff_max_ms),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism == 0 {
            return Err("parallelism must be >= 1".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err("temperature must be >= 0".into());
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// True unless the URL points at the local machine.
pub fn is_remote_url(url: &str) -> bool {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    let authority = rest.split('/').next().unwrap_or_default();
    let authority = authority.rsplit_once('@').map_or(authority, |(_, h)| h);
    let host = if let Some(v6) = authority.strip_prefix('[') {
        v6.split(']').next().unwrap_or_default()
    } else {
        authority.split(':').next().unwrap_or_default()
    };
    !matches!(host.to_ascii_lowercase().as_str(), "localhost" | "127.0.0.1" | "::1" | "0.0.0.0")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: String,
    pub latency: Duration,
    pub token_usage: Option<(u64, u64)>,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n: usize,
    pub messages: Vec<WireMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: Vec<WireContent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireContent {
    Text { text: String },
    ImageUrl { image_url: WireImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub choices: Vec<WireChoice>,
    #[serde(default)]
    pub usage: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    pub message: WireChoiceMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoiceMessage {
    #[serde(default)]
    pub content: Option<String>,
}

impl WireResponse {
    pub fn from_texts(texts: impl IntoIterator<Item = String>) -> Self {
        WireResponse {
            choices: texts
                .into_iter()
                .map(|t| WireChoice {
                    message: WireChoiceMessage { content: Some(t) },
                    finish_reason: Some("stop".into()),
                })
                .collect(),
            usage: None,
        }
    }
}

impl WireRequest {
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| {
                m.content
                    .iter()
                    .filter_map(|c| match c {
                        WireContent::Text { text } => Some(text.as_str()),
                        WireContent::ImageUrl { .. } => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn image_mime(path: &Path) -> String {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "jpg" | "jpeg" => "jpeg".into(),
        "" => "png".into(),
        other => other.into(),
    }
}

/// Data URIs pass through; paths are read and base64-encoded.
pub fn image_to_data_uri(img: &ImageRef) -> Result<String, ClientError> {
    if img.is_data_uri() {
        return Ok(img.as_str().to_string());
    }
    let path = Path::new(img.as_str());
    let bytes = std::fs::read(path).map_err(|e| ClientError::ImageRead {
        path: img.as_str().to_string(),
        message: e.to_string(),
    })?;
    Ok(format!(
        "data:image/{};base64,{}",
        image_mime(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

pub fn to_wire(t: &Transcript, cfg: &EndpointConfig, n: usize) -> Result<WireRequest, ClientError> {
    let messages = t
        .messages
        .iter()
        .map(|m| {
            let content = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text { text } => Ok(WireContent::Text { text: text.clone() }),
                    Part::Image { image } => Ok(WireContent::ImageUrl {
                        image_url: WireImageUrl { url: image_to_data_uri(image)? },
                    }),
                })
                .collect::<Result<Vec<_>, ClientError>>()?;
            Ok(WireMessage { role: role_name(m.role).into(), content })
        })
        .collect::<Result<Vec<_>, ClientError>>()?;
    Ok(WireRequest {
        model: cfg.model.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        n,
        messages,
    })
}

pub fn from_wire(req: &WireRequest) -> Result<Transcript, ClientError> {
    let messages = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role.as_str() {
                "system" => Role::System,
                "user" => Role::User,
                "assistant" => Role::Assistant,
                other => return Err(ClientError::MalformedResponse(format!("unknown role `{other}`"))),
            };
            let parts = m
                .content
                .iter()
                .map(|c| match c {
                    WireContent::Text { text } => Part::text(text.clone()),
                    WireContent::ImageUrl { image_url } => Part::image(ImageRef::new(image_url.url.clone())),
                })
                .collect();
            Ok(ChatMessage::new(role, parts))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Transcript { messages })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub sample_id: Option<String>,
    pub group_index: usize,
}

impl RequestMeta {
    pub fn for_sample(id: impl Into<String>) -> Self {
        RequestMeta { sample_id: Some(id.into()), group_index: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BackendReply {
    pub response: WireResponse,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("HTTP {code}: {body}")]
    Status {
        code: u16,
        retry_after: Option<Duration>,
        body: String,
    },
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

pub trait Backend: Send + Sync {
    fn send(&self, request: &WireRequest, meta: &RequestMeta, api_key: Option<&str>) -> Result<BackendReply, BackendError>;

    /// Remote backends require an API key.
    fn is_remote(&self) -> bool;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("API key environment variable `{0}` is not set")]
    AuthMissing(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("non-retryable HTTP status {code}: {body}")]
    NonRetryableStatus { code: u16, body: String },
    #[error("cannot read image {path}: {message}")]
    ImageRead { path: String, message: String },
    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("{} of {} group completions succeeded; first error: {first_error}", successes.len(), requested)]
    PartialGroup {
        requested: usize,
        successes: Vec<(usize, CompletionResult)>,
        first_error: Box<ClientError>,
    },
}

impl ClientError {
    /// True for failures of the network path rather than of inputs.
    pub fn is_transport(&self) -> bool {
        match self {
            ClientError::Transport { .. } | ClientError::NonRetryableStatus { .. } | ClientError::MalformedResponse(_) => true,
            ClientError::PartialGroup { first_error, .. } => first_error.is_transport(),
            _ => false,
        }
    }
}

/// Exponential backoff with up to +50% jitter. Since `1.5 * 2^i <= 2^(i+1)`,
/// successive delays never decrease, including after the `max` cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub max: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), `jitter` in `[0, 1)`.
    pub fn delay(&self, retry: u32, jitter: f64) -> Duration {
        let factor = 2f64.powi(retry.min(62) as i32) * (1.0 + 0.5 * jitter.clamp(0.0, 1.0));
        self.base.mul_f64(factor).min(self.max)
    }

    pub fn schedule(&self, jitters: &[f64]) -> Vec<Duration> {
        (0..self.max_retries)
            .map(|i| self.delay(i, jitters.get(i as usize).copied().unwrap_or(0.0)))
            .collect()
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { available: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable across threads; at most `parallelism` requests are in flight.
pub struct VlmClient {
    cfg: EndpointConfig,
    backend: Arc<dyn Backend>,
    api_key: Option<String>,
    permits: Semaphore,
}

impl VlmClient {
    pub fn new(cfg: EndpointConfig, backend: Arc<dyn Backend>) -> Result<Self, ClientError> {
        cfg.validate().map_err(ClientError::Config)?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if backend.is_remote() && api_key.is_none() {
            return Err(ClientError::AuthMissing(cfg.api_key_env.clone()));
        }
        let permits = Semaphore::new(cfg.parallelism);
        Ok(VlmClient { cfg, backend, api_key, permits })
    }

    pub fn http(cfg: EndpointConfig) -> Result<Self, ClientError> {
        let backend = Arc::new(HttpBackend::new(&cfg));
        VlmClient::new(cfg, backend)
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn send_with_retry(&self, req: &WireRequest, meta: &RequestMeta) -> Result<(BackendReply, u32), ClientError> {
        let policy = self.cfg.retry_policy();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = self.permits.acquire();
                self.backend.send(req, meta, self.api_key.as_deref())
            };
            let (message, advised) = match outcome {
                Ok(reply) => return Ok((reply, attempt)),
                Err(BackendError::Malformed(m)) => return Err(ClientError::MalformedResponse(m)),
                Err(BackendError::Status { code, body, .. }) if (400..500).contains(&code) && code != 429 && code != 408 => {
                    return Err(ClientError::NonRetryableStatus { code, body });
                }
                Err(BackendError::Status { code, retry_after, body }) => (format!("HTTP {code}: {body}"), retry_after),
                Err(BackendError::Transport(m)) => (m, None),
            };
            if attempt > policy.max_retries {
                return Err(ClientError::Transport { attempts: attempt, message });
            }
            let delay = match advised {
                Some(d) => d.min(policy.max),
                None => policy.delay(attempt - 1, rand::thread_rng().gen::<f64>()),
            };
            std::thread::sleep(delay);
        }
    }

    fn results_from(reply: BackendReply, attempt: u32, n: usize) -> Result<Vec<CompletionResult>, ClientError> {
        let usage = reply.response.usage.as_ref().and_then(|u| {
            Some((u.get("prompt_tokens")?.as_u64()?, u.get("completion_tokens")?.as_u64()?))
        });
        if reply.response.choices.len() < n {
            return Err(ClientError::MalformedResponse(format!(
                "expected {n} choice(s), got {}",
                reply.response.choices.len()
            )));
        }
        reply
            .response
            .choices
            .into_iter()
            .take(n)
            .map(|c| {
                let finish_reason = c.finish_reason.unwrap_or_else(|| "stop".into());
                let text = match (c.message.content, finish_reason.as_str()) {
                    (Some(t), _) => t,
                    (None, "stop") => return Err(ClientError::MalformedResponse("choice has no content".into())),
                    (None, _) => String::new(),
                };
                Ok(CompletionResult { text, finish_reason, latency: reply.elapsed, token_usage: usage, attempt })
            })
            .collect()
    }

    pub fn complete(&self, t: &Transcript, meta: &RequestMeta) -> Result<CompletionResult, ClientError> {
        t.check().map_err(ClientError::InvalidTranscript)?;
        let req = to_wire(t, &self.cfg, 1)?;
        let (reply, attempt) = self.send_with_retry(&req, meta)?;
        Ok(Self::results_from(reply, attempt, 1)?.remove(0))
    }

    /// `n` samples returned in index order. With `n > 1`, any failure yields
    /// [`ClientError::PartialGroup`] carrying the successes.
    pub fn complete_group(&self, t: &Transcript, n: usize, meta: &RequestMeta) -> Result<Vec<CompletionResult>, ClientError> {
        if n <= 1 {
            return if n == 0 { Ok(Vec::new()) } else { self.complete(t, meta).map(|r| vec![r]) };
        }
        t.check().map_err(ClientError::InvalidTranscript)?;
        if self.cfg.server_side_n {
            let req = to_wire(t, &self.cfg, n)?;
            let (reply, attempt) = self.send_with_retry(&req, meta)?;
            return Self::results_from(reply, attempt, n);
        }
        let outcomes: Vec<Result<CompletionResult, ClientError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .map(|i| {
                    let meta = RequestMeta { group_index: i, ..meta.clone() };
                    scope.spawn(move || self.complete(t, &meta))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("completion worker panicked")).collect()
        });
        let mut successes = Vec::with_capacity(n);
        let mut first_error = None;
        for (i, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(r) => successes.push((i, r)),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        match first_error {
            None => Ok(successes.into_iter().map(|(_, r)| r).collect()),
            Some(e) => Err(ClientError::PartialGroup { requested: n, successes, first_error: Box::new(e) }),
        }
    }
}

/// Blocking HTTP transport posting to `<base_url>/chat/completions`.
pub struct HttpBackend {
    url: String,
    remote: bool,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: &EndpointConfig) -> Self {
        let base = cfg.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout()).build();
        HttpBackend { url, remote: is_remote_url(&cfg.base_url), agent }
    }
}

impl Backend for HttpBackend {
    fn send(&self, request: &WireRequest, meta: &RequestMeta, api_key: Option<&str>) -> Result<BackendReply, BackendError> {
        let started = Instant::now();
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        if let Some(id) = &meta.sample_id {
            call = call.set("X-Sample-Id", id);
        }
        let body = serde_json::to_string(request).map_err(|e| BackendError::Malformed(e.to_string()))?;
        match call.send_string(&body) {
            Ok(resp) => {
                let text = resp.into_string().map_err(|e| BackendError::Transport(e.to_string()))?;
                let response = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
                Ok(BackendReply { response, elapsed: started.elapsed() })
            }
            Err(ureq::Error::Status(code, resp)) => {
                let retry_after = resp
                    .header("Retry-After")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .map(Duration::from_secs_f64);
                let body = resp.into_string().unwrap_or_default();
                Err(BackendError::Status { code, retry_after, body })
            }
            Err(e) => Err(BackendError::Transport(e.to_string())),
        }
    }

    fn is_remote(&self) -> bool {
        self.remote
    }
}

pub const UNMATCHED_SENTINEL: &str = "<answer>UNMATCHED</answer>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    LastUserContains(String),
    SampleId(String),
    GroupIndex(usize),
    Any,
}

impl Matcher {
    fn matches(&self, req: &WireRequest, meta: &RequestMeta) -> bool {
        match self {
            Matcher::LastUserContains(s) => req.last_user_text().contains(s.as_str()),
            Matcher::SampleId(id) => meta.sample_id.as_deref() == Some(id.as_str()),
            Matcher::GroupIndex(i) => meta.group_index == *i,
            Matcher::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StubReply {
    Text(String),
    /// Picked by group index, cycling.
    ByIndex(Vec<String>),
}

impl StubReply {
    fn pick(&self, index: usize) -> String {
        match self {
            StubReply::Text(t) => t.clone(),
            StubReply::ByIndex(v) if v.is_empty() => String::new(),
            StubReply::ByIndex(v) => v[index % v.len()].clone(),
        }
    }
}

/// A scripted reply; all listed matchers must hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(rename = "match")]
    pub matchers: Vec<Matcher>,
    pub reply: StubReply,
}

impl Rule {
    pub fn new(matcher: Matcher, reply: impl Into<String>) -> Self {
        Rule { matchers: vec![matcher], reply: StubReply::Text(reply.into()) }
    }

    pub fn when_user_contains(needle: impl Into<String>, reply: impl Into<String>) -> Self {
        Rule::new(Matcher::LastUserContains(needle.into()), reply)
    }

    fn matches(&self, req: &WireRequest, meta: &RequestMeta) -> bool {
        self.matchers.iter().all(|m| m.matches(req, meta))
    }
}

/// Injected failure: answer matching requests with `status`, `times` times
/// (forever when `None`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    #[serde(rename = "match")]
    pub matchers: Vec<Matcher>,
    pub status: u16,
    pub times: Option<usize>,
    #[serde(default)]
    pub retry_after_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub request: WireRequest,
    pub meta: RequestMeta,
}

/// Deterministic in-process backend answering by first matching rule.
pub struct ScriptedStub {
    rules: Vec<Rule>,
    faults: Mutex<Vec<Fault>>,
    log: Mutex<Vec<LoggedRequest>>,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    hold: Duration,
    reported_latency: Duration,
}

pub fn scripted_stub(rules: Vec<Rule>) -> ScriptedStub {
    ScriptedStub {
        rules,
        faults: Mutex::new(Vec::new()),
        log: Mutex::new(Vec::new()),
        in_flight: AtomicUsize::new(0),
        high_water: AtomicUsize::new(0),
        hold: Duration::ZERO,
        reported_latency: Duration::ZERO,
    }
}

impl ScriptedStub {
    pub fn with_fault(self, fault: Fault) -> Self {
        self.faults.lock().expect("stub poisoned").push(fault);
        self
    }

    /// Wall-clock time each request is held, to make concurrency observable.
    pub fn with_hold(mut self, hold: Duration) -> Self {
        self.hold = hold;
        self
    }

    /// Latency reported to the client, independent of real time.
    pub fn with_reported_latency(mut self, latency: Duration) -> Self {
        self.reported_latency = latency;
        self
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.log.lock().expect("stub poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().expect("stub poisoned").len()
    }

    pub fn high_water_mark(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn reply_for(&self, req: &WireRequest, meta: &RequestMeta) -> String {
        self.rules
            .iter()
            .find(|r| r.matches(req, meta))
            .map(|r| r.reply.pick(meta.group_index))
            .unwrap_or_else(|| UNMATCHED_SENTINEL.to_string())
    }

    fn injected_fault(&self, req: &WireRequest, meta: &RequestMeta) -> Option<BackendError> {
        let mut faults = self.faults.lock().expect("stub poisoned");
        let fault = faults
            .iter_mut()
            .find(|f| f.times != Some(0) && f.matchers.iter().all(|m| m.matches(req, meta)))?;
        if let Some(t) = fault.times.as_mut() {
            *t -= 1;
        }
        Some(BackendError::Status {
            code: fault.status,
            retry_after: fault.retry_after_ms.map(Duration::from_millis),
            body: "injected fault".into(),
        })
    }
}

impl Backend for ScriptedStub {
    fn send(&self, request: &WireRequest, meta: &RequestMeta, _api_key: Option<&str>) -> Result<BackendReply, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        self.log
            .lock()
            .expect("stub poisoned")
            .push(LoggedRequest { request: request.clone(), meta: meta.clone() });
        if !self.hold.is_zero() {
            std::thread::sleep(self.hold);
        }
        let outcome = match self.injected_fault(request, meta) {
            Some(err) => Err(err),
            None => {
                let texts = (0..request.n.max(1)).map(|i| {
                    let m = RequestMeta { group_index: meta.group_index + i, ..meta.clone() };
                    self.reply_for(request, &m)
                });
                Ok(BackendReply { response: WireResponse::from_texts(texts), elapsed: self.reported_latency })
            }
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        outcome
    }

    fn is_remote(&self) -> bool {
        false
    }
}
