// SPDX-License-Identifier: Apache-2.0

//! Model backends.
//!
//! [`Backend`] is the boundary to the multimodal model: it takes an image
//! reference plus turns whose regions are already serialized and returns
//! the model's text. Implementations here:
//!
//! - [`RemoteBackend`]: JSON over HTTP to a chat-completion server.
//! - [`FixtureBackend`]: records or replays request/response pairs.
//! - [`PerfectOracle`] and [`IouThresholdOracle`]: deterministic mocks that
//!   answer from ground truth, used to test the evaluation harness offline.
//!
//! [`LlmClient`] is the text-only side used for corpus generation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GtObject, InstructionRecord};
use crate::geometry::{enclosing_box, iou, ImageDims, Region, RegionKind};
use crate::instructgen::{
    expand_region_placeholders, parse_region_tokens, prompt_skeleton, RegionFormat, Role,
    TaskKind, TemplateRegistry,
};

pub const ENV_ENDPOINT: &str = "SPOTKIT_ENDPOINT";
pub const ENV_TOKEN: &str = "SPOTKIT_TOKEN";

/// Answer given by mocks when nothing suitable overlaps the query.
pub const OUT_OF_VOCABULARY: &str = "I am not sure what this is.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Connection or server-side failure; worth retrying.
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("invalid request: {0}")]
    Precondition(String),
    /// A mock oracle could not answer; this points at a harness bug.
    #[error("oracle error: {0}")]
    Oracle(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
}

/// Input to a model call. The final turn is always from the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub image_uri: String,
    pub dims: ImageDims,
    pub turns: Vec<ChatTurn>,
}

impl BackendRequest {
    pub fn new(
        image_uri: impl Into<String>,
        dims: ImageDims,
        turns: Vec<ChatTurn>,
    ) -> Result<Self, BackendError> {
        let req = Self {
            image_uri: image_uri.into(),
            dims,
            turns,
        };
        req.check()?;
        Ok(req)
    }

    pub fn check(&self) -> Result<(), BackendError> {
        match self.turns.last() {
            None => Err(BackendError::Precondition("request has no turns".into())),
            Some(t) if t.role != Role::User => Err(BackendError::Precondition(
                "final turn must come from the user".into(),
            )),
            Some(_) => Ok(()),
        }
    }

    pub fn last_user_text(&self) -> &str {
        self.turns.last().map_or("", |t| t.text.as_str())
    }

    /// Builds the query for a stored record: every turn up to the last user
    /// turn, with `regions` substituted for the record's own.
    pub fn for_record(
        record: &InstructionRecord,
        regions: &[Region],
        format: &RegionFormat,
    ) -> Result<Self, BackendError> {
        let last_user = record
            .turns
            .iter()
            .rposition(|t| t.role == Role::User)
            .ok_or_else(|| BackendError::Precondition(format!("record {} has no user turn", record.id)))?;
        let turns = record.turns[..=last_user]
            .iter()
            .map(|t| {
                expand_region_placeholders(&t.text, regions, format)
                    .map(|text| ChatTurn { role: t.role, text })
                    .map_err(|e| BackendError::Precondition(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(record.image.uri.clone(), record.image.dims, turns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// A chat model that answers region-level instructions.
///
/// Implementations are stateless across calls; conversation history travels
/// in the request. They must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(req)
    }
}

/// Text-in, text-out model used to synthesize corpus dialogues.
pub trait LlmClient: Send + Sync {
    fn complete_text(&self, prompt: &str) -> Result<String, BackendError>;
}

// ---------------------------------------------------------------------------
// Retry and concurrency plumbing

/// Exponential backoff: wait `base * factor^(k-1)` after the k-th failed try.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(with = "duration_secs")]
    pub base: Duration,
    pub factor: f64,
    pub max_tries: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_tries: 5,
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        Self {
            max_tries: 1,
            ..Self::default()
        }
    }

    pub fn delay_after(&self, failed_tries: u32) -> Duration {
        self.base
            .mul_f64(self.factor.powi(failed_tries.saturating_sub(1) as i32))
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

fn real_sleeper() -> Sleeper {
    Arc::new(std::thread::sleep)
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// policy's tries are exhausted.
pub fn run_with_retry<T>(
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let tries = policy.max_tries.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if !e.is_retryable() => return Err(e),
            Err(e) if attempt >= tries => {
                return Err(if tries > 1 {
                    BackendError::Transport(format!("gave up after {tries} tries: {e}"))
                } else {
                    e
                })
            }
            Err(e) => {
                let delay = policy.delay_after(attempt);
                log::warn!("attempt {attempt}/{tries} failed ({e}); retrying in {delay:?}");
                sleep(delay);
            }
        }
    }
}

/// Counting semaphore bounding concurrent outbound calls.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|p| p.into_inner());
        while *used >= self.max {
            used = self.freed.wait(used).unwrap_or_else(|p| p.into_inner());
        }
        *used += 1;
        InFlightGuard(self)
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|p| p.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum WireContent {
    Text(String),
    ImageUri(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: Role,
    pub content: Vec<WireContent>,
}

/// Request body sent to a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
}

impl WireRequest {
    /// The image reference rides on the first user message.
    pub fn from_request(model: &str, req: &BackendRequest) -> Self {
        let messages = req
            .turns
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut content = Vec::with_capacity(2);
                if i == 0 {
                    content.push(WireContent::ImageUri(req.image_uri.clone()));
                }
                content.push(WireContent::Text(t.text.clone()));
                WireMessage {
                    role: t.role,
                    content,
                }
            })
            .collect();
        Self {
            model: model.to_string(),
            messages,
        }
    }
}

fn check_response(resp: BackendResponse) -> Result<BackendResponse, BackendError> {
    if resp.text.trim().is_empty() {
        return Err(BackendError::Protocol("empty response text".into()));
    }
    if let Some(c) = resp.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(BackendError::Protocol(format!("confidence {c} outside [0, 1]")));
        }
    }
    Ok(resp)
}

fn map_ureq_error(e: ureq::Error, what: &str) -> BackendError {
    match e {
        ureq::Error::StatusCode(code) if code == 408 || code == 429 || code >= 500 => {
            BackendError::Transport(format!("{what}: HTTP {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::Protocol(format!("{what}: HTTP {code}")),
        ureq::Error::Timeout(t) => BackendError::Timeout(format!("{what}: {t}")),
        ureq::Error::Io(io) => BackendError::Transport(format!("{what}: {io}")),
        ureq::Error::HostNotFound | ureq::Error::ConnectionFailed => {
            BackendError::Transport(format!("{what}: cannot connect"))
        }
        other => BackendError::Protocol(format!("{what}: {other}")),
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout", with = "duration_secs")]
    pub timeout: Duration,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "RetryPolicy::no_retry")]
    pub retry: RetryPolicy,
}

fn default_model() -> String {
    "default".into()
}

fn default_timeout() -> Duration {
    Duration::from_secs(60)
}

fn default_in_flight() -> usize {
    8
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            model: default_model(),
            timeout: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::no_retry(),
        }
    }

    /// Endpoint and token from `SPOTKIT_ENDPOINT` / `SPOTKIT_TOKEN`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok()?;
        let mut cfg = Self::new(endpoint);
        cfg.token = std::env::var(ENV_TOKEN).ok();
        Some(cfg)
    }
}

/// Backend speaking the JSON wire format over HTTP.
pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    limit: InFlightLimit,
    sleeper: Sleeper,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            agent: agent(config.timeout),
            limit: InFlightLimit::new(config.max_in_flight),
            config,
            sleeper: real_sleeper(),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn send_once(&self, body: &WireRequest) -> Result<BackendResponse, BackendError> {
        let _slot = self.limit.acquire();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| map_ureq_error(e, &self.config.endpoint))?;
        let parsed: BackendResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(format!("malformed response body: {e}")))?;
        check_response(parsed)
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        req.check()?;
        let body = WireRequest::from_request(&self.config.model, req);
        run_with_retry(&self.config.retry, &*self.sleeper, || self.send_once(&body))
    }
}

// ---------------------------------------------------------------------------
// Generator LLM client

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Full URL of an OpenAI-compatible `chat/completions` endpoint.
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout", with = "duration_secs")]
    pub timeout: Duration,
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Sampling seed, for servers that honour one.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            model: model.into(),
            timeout: default_timeout(),
            temperature: None,
            seed: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: [ChatCompletionMessage<'a>; 1],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ChatCompletionMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatCompletionChoice>,
}

#[derive(Deserialize)]
struct ChatCompletionChoice {
    message: ChatCompletionReply,
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    content: Option<String>,
}

/// HTTP client for the generator LLM with exponential backoff.
pub struct HttpLlmClient {
    config: LlmConfig,
    agent: ureq::Agent,
    sleeper: Sleeper,
}

impl HttpLlmClient {
    pub fn new(config: LlmConfig) -> Self {
        Self {
            agent: agent(config.timeout),
            config,
            sleeper: real_sleeper(),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    fn send_once(&self, prompt: &str) -> Result<String, BackendError> {
        let body = ChatCompletionRequest {
            model: &self.config.model,
            messages: [ChatCompletionMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.config.temperature,
            seed: self.config.seed,
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| map_ureq_error(e, &self.config.endpoint))?;
        let parsed: ChatCompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(format!("malformed completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| BackendError::Protocol("completion has no content".into()))
    }
}

impl LlmClient for HttpLlmClient {
    fn complete_text(&self, prompt: &str) -> Result<String, BackendError> {
        run_with_retry(&self.config.retry, &*self.sleeper, || self.send_once(prompt))
    }
}

// ---------------------------------------------------------------------------
// Record / replay

#[derive(Serialize, Deserialize)]
struct FixtureLine<Q, A> {
    request: Q,
    response: A,
}

/// Append-only request -> response log keyed by the request's JSON text.
struct FixtureLog<A> {
    entries: HashMap<String, Vec<A>>,
    cursors: HashMap<String, usize>,
    sink: Option<fs::File>,
}

impl<A: Clone + Serialize + serde::de::DeserializeOwned> FixtureLog<A> {
    fn load<Q: Serialize + serde::de::DeserializeOwned>(path: &Path) -> Result<Self, BackendError> {
        let file = fs::File::open(path)
            .map_err(|e| BackendError::Precondition(format!("fixture {}: {e}", path.display())))?;
        let mut entries: HashMap<String, Vec<A>> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Precondition(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine<Q, A> = serde_json::from_str(&line).map_err(|e| {
                BackendError::Precondition(format!("fixture {} line {}: {e}", path.display(), i + 1))
            })?;
            let key = serde_json::to_string(&parsed.request).expect("serializable");
            entries.entry(key).or_default().push(parsed.response);
        }
        Ok(Self {
            entries,
            cursors: HashMap::new(),
            sink: None,
        })
    }

    fn create(path: &Path) -> Result<Self, BackendError> {
        let sink = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::Precondition(format!("fixture {}: {e}", path.display())))?;
        Ok(Self {
            entries: HashMap::new(),
            cursors: HashMap::new(),
            sink: Some(sink),
        })
    }

    fn append<Q: Serialize>(&mut self, request: &Q, response: &A) -> Result<(), BackendError> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&FixtureLine { request, response }).expect("serializable");
            writeln!(sink, "{line}").map_err(|e| BackendError::Precondition(e.to_string()))?;
        }
        Ok(())
    }

    /// Stateless lookup: the first recorded answer.
    fn first(&self, key: &str) -> Option<A> {
        self.entries.get(key).and_then(|v| v.first().cloned())
    }

    /// Sequential lookup: successive calls walk the recorded answers, then
    /// keep returning the last one.
    fn next(&mut self, key: &str) -> Option<A> {
        let list = self.entries.get(key)?;
        let cursor = self.cursors.entry(key.to_string()).or_insert(0);
        let out = list.get((*cursor).min(list.len() - 1)).cloned();
        *cursor += 1;
        out
    }
}

enum FixtureMode<T: ?Sized> {
    Record(Box<T>),
    Replay,
}

/// Records a backend's traffic to a JSON-lines file, or replays it offline.
pub struct FixtureBackend {
    mode: FixtureMode<dyn Backend>,
    model: String,
    path: PathBuf,
    log: Mutex<FixtureLog<BackendResponse>>,
}

impl FixtureBackend {
    pub fn record(inner: Box<dyn Backend>, path: &Path) -> Result<Self, BackendError> {
        Ok(Self {
            mode: FixtureMode::Record(inner),
            model: String::new(),
            path: path.to_path_buf(),
            log: Mutex::new(FixtureLog::create(path)?),
        })
    }

    pub fn replay(path: &Path) -> Result<Self, BackendError> {
        Ok(Self {
            mode: FixtureMode::Replay,
            model: String::new(),
            path: path.to_path_buf(),
            log: Mutex::new(FixtureLog::load::<WireRequest>(path)?),
        })
    }

    fn key(&self, req: &BackendRequest) -> WireRequest {
        WireRequest::from_request(&self.model, req)
    }
}

impl Backend for FixtureBackend {
    fn id(&self) -> String {
        match &self.mode {
            FixtureMode::Record(inner) => format!("record:{}", inner.id()),
            FixtureMode::Replay => format!("replay:{}", self.path.display()),
        }
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        req.check()?;
        let wire = self.key(req);
        match &self.mode {
            FixtureMode::Record(inner) => {
                let resp = inner.complete(req)?;
                self.log
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .append(&wire, &resp)?;
                Ok(resp)
            }
            FixtureMode::Replay => {
                let key = serde_json::to_string(&wire).expect("serializable");
                self.log
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .first(&key)
                    .ok_or_else(|| BackendError::Protocol("no recorded response for request".into()))
            }
        }
    }
}

/// [`LlmClient`] counterpart of [`FixtureBackend`]. Replays walk the recorded
/// completions of a prompt in order, so retried prompts stay deterministic.
pub struct FixtureLlm {
    mode: FixtureMode<dyn LlmClient>,
    log: Mutex<FixtureLog<String>>,
}

impl FixtureLlm {
    pub fn record(inner: Box<dyn LlmClient>, path: &Path) -> Result<Self, BackendError> {
        Ok(Self {
            mode: FixtureMode::Record(inner),
            log: Mutex::new(FixtureLog::create(path)?),
        })
    }

    pub fn replay(path: &Path) -> Result<Self, BackendError> {
        Ok(Self {
            mode: FixtureMode::Replay,
            log: Mutex::new(FixtureLog::load::<String>(path)?),
        })
    }
}

impl LlmClient for FixtureLlm {
    fn complete_text(&self, prompt: &str) -> Result<String, BackendError> {
        match &self.mode {
            FixtureMode::Record(inner) => {
                let out = inner.complete_text(prompt)?;
                self.log
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .append(&prompt, &out)?;
                Ok(out)
            }
            FixtureMode::Replay => {
                let key = serde_json::to_string(prompt).expect("serializable");
                self.log
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .next(&key)
                    .ok_or_else(|| BackendError::Protocol("no recorded completion for prompt".into()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ground-truth oracles

/// A question or OCR answer attached to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTruth {
    /// Lowercased prompt text with regions removed; see [`prompt_skeleton`].
    pub skeleton: String,
    pub region: Option<Region>,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTruth {
    pub objects: Vec<GtObject>,
    pub texts: Vec<TextTruth>,
}

/// Ground truth per image URI, as seen by the mock oracles.
#[derive(Debug, Clone, Default)]
pub struct GtIndex {
    images: HashMap<String, ImageTruth>,
}

impl GtIndex {
    pub fn from_records(records: &[InstructionRecord]) -> Self {
        let mut index = Self::default();
        for r in records {
            let Some(gt) = &r.ground_truth else { continue };
            let entry = index.images.entry(r.image.uri.clone()).or_default();
            if let Some(objects) = &gt.all_objects {
                if entry.objects.is_empty() {
                    entry.objects = objects.clone();
                }
            }
            if let Some(answer) = &gt.answer {
                let prompt = r
                    .turns
                    .iter()
                    .find(|t| t.role == Role::User)
                    .map_or("", |t| t.text.as_str());
                entry.texts.push(TextTruth {
                    skeleton: prompt_skeleton(prompt),
                    region: r.regions.first().cloned(),
                    answer: answer.clone(),
                });
            }
        }
        index
    }

    pub fn insert(&mut self, image_uri: impl Into<String>, truth: ImageTruth) {
        self.images.insert(image_uri.into(), truth);
    }

    pub fn get(&self, image_uri: &str) -> Option<&ImageTruth> {
        self.images.get(image_uri)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// How strongly a queried region refers to a ground-truth box, as a sortable
/// pair: IoU for boxes and polygons (via their enclosing box); for points,
/// containment with smaller boxes preferred.
fn affinity(query: &Region, target: &Region) -> (f64, f64) {
    let target_box = enclosing_box(target);
    let area = target_box.area().unwrap_or(0.0);
    if query.kind() == RegionKind::Point {
        let p = query.points()[0];
        let (x1, y1, x2, y2) = target_box.corners().expect("box");
        let inside = p.x >= x1 && p.x <= x2 && p.y >= y1 && p.y <= y2;
        return (if inside { 1.0 } else { 0.0 }, -area);
    }
    let q = enclosing_box(query);
    (iou(&q, &target_box).unwrap_or(0.0), -area)
}

/// Candidates sorted by descending affinity; ties keep input order.
fn ranked<'a, T>(query: &Region, items: &'a [T], region_of: impl Fn(&T) -> Option<&Region>) -> Vec<(f64, &'a T)> {
    let mut scored: Vec<(f64, f64, usize, &T)> = items
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            region_of(t).map(|r| {
                let (s, tie) = affinity(query, r);
                (s, tie, i, t)
            })
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    scored.into_iter().map(|(s, _, _, t)| (s, t)).collect()
}

pub fn class_sentence(category: &str) -> String {
    format!("I can see a {category} in this region.")
}

fn ocr_sentence(answer: &str) -> String {
    format!("The text in this region reads \"{answer}\".")
}

fn answer_sentence(answer: &str) -> String {
    format!("The answer is {answer}.")
}

enum Query<'a> {
    Class(&'a ImageTruth, Region),
    Text(&'a ImageTruth, Option<Region>, String),
}

/// Shared request analysis for the oracles.
fn analyze<'a>(
    gt: &'a GtIndex,
    registry: &TemplateRegistry,
    req: &BackendRequest,
) -> Result<Query<'a>, BackendError> {
    req.check()?;
    let truth = gt
        .get(&req.image_uri)
        .ok_or_else(|| BackendError::Oracle(format!("unknown image {}", req.image_uri)))?;
    let prompt = req.last_user_text();
    let spans = parse_region_tokens(prompt).map_err(|e| BackendError::Oracle(e.to_string()))?;
    let region = spans.into_iter().next().map(|s| s.region);
    let task = registry.identify_task(prompt);
    let wants_class = match task {
        Some(TaskKind::RegionClass) => true,
        Some(_) => false,
        None => truth.texts.is_empty(),
    };
    if wants_class {
        let region = region
            .ok_or_else(|| BackendError::Oracle("region prompt without a <box> span".into()))?;
        return Ok(Query::Class(truth, region));
    }
    if task.is_some_and(TaskKind::is_region_task) && region.is_none() {
        return Err(BackendError::Oracle("region prompt without a <box> span".into()));
    }
    Ok(Query::Text(truth, region, prompt_skeleton(prompt)))
}

/// Best text answer: best region overlap first, the same prompt skeleton
/// breaking ties (several questions about one region).
fn pick_text<'a>(truth: &'a ImageTruth, region: Option<&Region>, skeleton: &str) -> Option<(f64, &'a TextTruth)> {
    match region {
        None => truth
            .texts
            .iter()
            .find(|t| t.skeleton == skeleton && t.region.is_none())
            .or_else(|| truth.texts.iter().find(|t| t.skeleton == skeleton))
            .map(|t| (1.0, t)),
        Some(q) => {
            let ranking = ranked(q, &truth.texts, |t| t.region.as_ref());
            let best = ranking.first()?.0;
            ranking
                .iter()
                .take_while(|(s, _)| *s == best)
                .find(|(_, t)| t.skeleton == skeleton)
                .or(ranking.first())
                .copied()
        }
    }
}

/// Answers every query from ground truth with full-sentence responses.
pub struct PerfectOracle {
    gt: GtIndex,
    registry: TemplateRegistry,
}

impl PerfectOracle {
    pub fn new(gt: GtIndex) -> Self {
        Self::with_registry(gt, TemplateRegistry::default())
    }

    pub fn with_registry(gt: GtIndex, registry: TemplateRegistry) -> Self {
        Self { gt, registry }
    }
}

impl Backend for PerfectOracle {
    fn id(&self) -> String {
        "perfect-oracle".into()
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let text = match analyze(&self.gt, &self.registry, req)? {
            Query::Class(truth, region) => {
                match ranked(&region, &truth.objects, |o| Some(&o.bbox)).first() {
                    Some((s, obj)) if *s > 0.0 => class_sentence(&obj.category),
                    _ => OUT_OF_VOCABULARY.to_string(),
                }
            }
            Query::Text(truth, region, skeleton) => {
                let (_, t) = pick_text(truth, region.as_ref(), &skeleton)
                    .ok_or_else(|| BackendError::Oracle(format!("no answer for `{skeleton}`")))?;
                if region.is_some() && t.skeleton == skeleton && prompt_is_question(&skeleton) {
                    answer_sentence(&t.answer)
                } else if region.is_some() {
                    ocr_sentence(&t.answer)
                } else {
                    answer_sentence(&t.answer)
                }
            }
        };
        Ok(BackendResponse {
            text,
            confidence: Some(1.0),
        })
    }
}

fn prompt_is_question(skeleton: &str) -> bool {
    !skeleton.contains("text")
}

/// Answers the class of the best-overlapping object when its IoU reaches
/// `tau`; otherwise the class of the next-best overlapping object, or an
/// out-of-vocabulary sentence.
pub struct IouThresholdOracle {
    gt: GtIndex,
    tau: f64,
    registry: TemplateRegistry,
}

impl IouThresholdOracle {
    pub fn new(gt: GtIndex, tau: f64) -> Self {
        Self {
            gt,
            tau,
            registry: TemplateRegistry::default(),
        }
    }
}

impl Backend for IouThresholdOracle {
    fn id(&self) -> String {
        format!("iou-oracle({})", self.tau)
    }

    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let text = match analyze(&self.gt, &self.registry, req)? {
            Query::Class(truth, region) => {
                let ranking = ranked(&region, &truth.objects, |o| Some(&o.bbox));
                match ranking.as_slice() {
                    [(best, obj), ..] if *best >= self.tau => class_sentence(&obj.category),
                    [_, (second, other), ..] if *second > 0.0 => class_sentence(&other.category),
                    _ => OUT_OF_VOCABULARY.to_string(),
                }
            }
            Query::Text(truth, region, skeleton) => match pick_text(truth, region.as_ref(), &skeleton) {
                Some((s, t)) if s >= self.tau || region.is_none() => answer_sentence(&t.answer),
                _ => OUT_OF_VOCABULARY.to_string(),
            },
        };
        Ok(BackendResponse {
            text,
            confidence: None,
        })
    }
}
