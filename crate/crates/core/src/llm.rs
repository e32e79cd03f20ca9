//! Client for chat-completions style inference endpoints.
//!
//! Requests go to `POST {base_url}/v1/chat/completions`. Rate limits (429),
//! server errors (5xx), timeouts and connection failures are retried with
//! exponential backoff and jitter. Successful responses are stored in an
//! append-only JSONL cache keyed by [`prompt_digest`], so a repeated request
//! (including one issued after a crash and restart) never reaches the network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{join_messages, prompt_digest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model_id: String,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl GenerationConfig {
    /// Greedy decoding capped at 256 output tokens.
    pub fn greedy(model_id: &str) -> Self {
        Self {
            model_id: model_id.to_string(),
            temperature: 0.0,
            max_output_tokens: 256,
            stop_sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model_id.is_empty() {
            return Err(LlmError::InvalidConfig("model_id is empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidConfig("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Fixed-field-order JSON used in cache keys.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub config: GenerationConfig,
    pub system: Option<String>,
    pub user: String,
    /// Distinguishes deliberate re-asks of the same prompt in the cache key.
    pub salt: u32,
}

impl CompletionRequest {
    pub fn new(config: GenerationConfig, system: Option<String>, user: String) -> Self {
        Self {
            config,
            system,
            user,
            salt: 0,
        }
    }

    /// Cache key. With `salt == 0` this is the digest of the joined prompt.
    pub fn digest(&self) -> String {
        let mut prompt = join_messages(self.system.as_deref(), &self.user);
        if self.salt > 0 {
            prompt.push_str(&format!("\0retry={}", self.salt));
        }
        prompt_digest(&prompt, &self.config.model_id, &self.config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    fn from_wire(raw: Option<&str>) -> Self {
        match raw {
            None | Some("stop") | Some("eos") | Some("stop_sequence") | Some("end_turn") => FinishReason::Stop,
            Some("length") | Some("max_tokens") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub from_cache: bool,
    pub digest: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response ({reason}): {raw}")]
    MalformedResponse { reason: String, raw: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            LlmError::Timeout | LlmError::Transport(_) => true,
            _ => false,
        }
    }

    pub(crate) fn from_reqwest(err: reqwest::Error) -> Self {
        if err.is_timeout() {
            LlmError::Timeout
        } else {
            LlmError::Transport(err.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub text: String,
    pub finish_reason: FinishReason,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub model_id: String,
}

/// Append-only response cache. Readers see every entry written by this
/// process; a single writer appends whole lines and flushes each one.
#[derive(Debug)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            path: None,
        }
    }

    /// Opens (creating if needed) a JSONL cache file. A torn last line from
    /// an interrupted write is ignored; the first entry for a key wins.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        entries.entry(entry.key.clone()).or_insert(entry);
                        torn_tail = false;
                    }
                    Err(err) => {
                        tracing::warn!(path = %path.display(), %err, "skipping unreadable cache line");
                        torn_tail = true;
                    }
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if torn_tail {
            // Start on a fresh line so the next entry is not glued to the fragment.
            file.write_all(b"\n")?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores an entry unless the key is already present.
    pub fn insert(&self, entry: CacheEntry) -> std::io::Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        if self.entries.read().expect("cache lock").contains_key(&entry.key) {
            return Ok(());
        }
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(entry.key.clone(), entry);
        Ok(())
    }

    /// Rewrites a cache file keeping the first entry per key and dropping
    /// unreadable lines. Returns (entries kept, lines dropped).
    pub fn compact(path: &Path) -> std::io::Result<(usize, usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::new();
        let mut dropped = 0;
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(&line) {
                Ok(entry) if seen.insert(entry.key.clone()) => kept.push(line),
                _ => dropped += 1,
            }
        }
        let tmp = path.with_extension("compact.tmp");
        {
            let mut out = std::io::BufWriter::new(File::create(&tmp)?);
            for line in &kept {
                out.write_all(line.as_bytes())?;
                out.write_all(b"\n")?;
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok((kept.len(), dropped))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Exponential delay for retry number `attempt` (0-based), scaled by a
    /// random factor in [0.5, 1.0).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(attempt.min(16)))
            .min(self.max_delay);
        exp.mul_f64(0.5 + rand::random::<f64>() * 0.5)
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// retry budget is spent. Each retry bumps `retries`.
pub(crate) async fn with_retries<T, F, Fut>(
    policy: &RetryPolicy,
    retries: &AtomicU64,
    mut op: F,
) -> Result<T, LlmError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, LlmError>>,
{
    let mut attempt = 0;
    loop {
        match op().await {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && attempt < policy.max_retries => {
                let delay = policy.delay(attempt);
                tracing::debug!(%err, attempt, ?delay, "retrying");
                retries.fetch_add(1, Ordering::Relaxed);
                tokio::time::sleep(delay).await;
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

#[derive(Debug, Default)]
pub struct ClientStats {
    network_calls: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub network_calls: u64,
    pub retries: u64,
    pub cache_hits: u64,
    pub failures: u64,
}

impl ClientStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            network_calls: self.network_calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

/// Parses a chat-completions response body into text and finish reason.
pub fn parse_completion_body(raw: &str) -> Result<(String, FinishReason), LlmError> {
    let malformed = |reason: String| LlmError::MalformedResponse {
        reason,
        raw: raw.to_string(),
    };
    let response: WireResponse = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| malformed("no choices".into()))?;
    let text = choice
        .message
        .content
        .ok_or_else(|| malformed("choices[0].message.content is missing".into()))?;
    Ok((text, FinishReason::from_wire(choice.finish_reason.as_deref())))
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl ClientConfig {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

/// A cached, retrying chat-completions client. Cheap to clone; clones share
/// the HTTP pool, cache and statistics.
#[derive(Debug, Clone)]
pub struct LlmClient {
    http: reqwest::Client,
    config: Arc<ClientConfig>,
    cache: Arc<ResponseCache>,
    stats: Arc<ClientStats>,
}

impl LlmClient {
    pub fn new(config: ClientConfig, cache: Arc<ResponseCache>) -> Result<Self, LlmError> {
        if config.base_url.is_empty() {
            return Err(LlmError::InvalidConfig("base_url is empty".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            http,
            config: Arc::new(config),
            cache,
            stats: Arc::new(ClientStats::default()),
        })
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    fn cached(&self, key: &str) -> Option<CompletionResult> {
        let entry = self.cache.get(key)?;
        self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
        Some(CompletionResult {
            text: entry.text,
            finish_reason: entry.finish_reason,
            latency: Duration::ZERO,
            from_cache: true,
            digest: entry.key,
        })
    }

    async fn call_once(&self, request: &CompletionRequest) -> Result<(String, FinishReason), LlmError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = request.system.as_deref() {
            messages.push(WireMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user,
        });
        let body = WireRequest {
            model: &request.config.model_id,
            messages,
            temperature: request.config.temperature,
            max_tokens: request.config.max_output_tokens,
            stop: &request.config.stop_sequences,
        };
        let url = format!("{}/v1/chat/completions", self.config.base_url);
        let mut builder = self.http.post(url).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        self.stats.network_calls.fetch_add(1, Ordering::Relaxed);
        let response = builder.send().await.map_err(LlmError::from_reqwest)?;
        let status = response.status();
        let raw = response.text().await.map_err(LlmError::from_reqwest)?;
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: raw,
            });
        }
        parse_completion_body(&raw)
    }

    pub async fn generate(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.config.validate()?;
        if request.user.is_empty() {
            return Err(LlmError::InvalidConfig("user prompt is empty".into()));
        }
        let key = request.digest();
        if let Some(hit) = self.cached(&key) {
            return Ok(hit);
        }
        let started = Instant::now();
        let outcome = with_retries(&self.config.retry, &self.stats.retries, || self.call_once(request)).await;
        let (text, finish_reason) = match outcome {
            Ok(ok) => ok,
            Err(err) => {
                self.stats.failures.fetch_add(1, Ordering::Relaxed);
                return Err(err);
            }
        };
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        self.cache.insert(CacheEntry {
            key: key.clone(),
            text: text.clone(),
            finish_reason,
            timestamp,
            model_id: request.config.model_id.clone(),
        })?;
        Ok(CompletionResult {
            text,
            finish_reason,
            latency: started.elapsed(),
            from_cache: false,
            digest: key,
        })
    }

    /// Generates every request with at most `max_in_flight` outstanding at
    /// once. Results line up with `requests`; per-item failures are returned
    /// in place. Only configuration problems fail the whole batch, and they
    /// are detected before any request is sent.
    pub async fn batch_generate(
        &self,
        requests: &[CompletionRequest],
        max_in_flight: usize,
    ) -> Result<Vec<Result<CompletionResult, LlmError>>, LlmError> {
        if max_in_flight == 0 {
            return Err(LlmError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        for request in requests {
            request.config.validate()?;
        }
        Ok(stream::iter(requests)
            .map(|request| self.generate(request))
            .buffered(max_in_flight)
            .collect()
            .await)
    }
}
