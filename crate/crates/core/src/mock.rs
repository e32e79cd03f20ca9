//! Scripted in-process HTTP servers standing in for a chat-completions
//! endpoint and a relevance scorer. Each server counts calls per prompt and
//! tracks the peak number of concurrently open requests.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

/// What the mock LLM sees of one request.
#[derive(Debug, Clone)]
pub struct MockCall {
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u64,
    /// 0-based index over all calls to this server.
    pub call_index: u64,
    /// Earlier calls with the same user message.
    pub prompt_calls: u64,
}

#[derive(Debug, Clone)]
pub enum MockReply {
    Text(String),
    /// Text with an explicit finish reason.
    TextWithReason(String, String),
    Status(u16),
    /// Raw body with status 200.
    Raw(String),
    /// Never answers.
    Hang,
}

type LlmScript = dyn Fn(&MockCall) -> MockReply + Send + Sync;

#[derive(Default)]
struct Counters {
    calls: AtomicU64,
    in_flight: AtomicU64,
    peak: AtomicU64,
    answered: AtomicU64,
    per_prompt: Mutex<HashMap<String, u64>>,
    answered_per_prompt: Mutex<HashMap<String, u64>>,
}

impl Counters {
    fn enter(&self) -> u64 {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst)
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct LlmState {
    script: Box<LlmScript>,
    delay: Duration,
    counters: Counters,
}

/// A running mock server; aborted on drop.
pub struct MockServer<S> {
    addr: SocketAddr,
    state: Arc<S>,
    task: JoinHandle<()>,
}

impl<S> MockServer<S> {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl<S> Drop for MockServer<S> {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn serve<S: Send + Sync + 'static>(router: Router, state: Arc<S>) -> MockServer<S> {
    let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind mock server");
    let addr = listener.local_addr().expect("local addr");
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    MockServer { addr, state, task }
}

pub type MockLlm = MockServer<LlmState>;

impl MockServer<LlmState> {
    /// Starts a chat-completions mock answering with `script`.
    pub async fn llm(script: impl Fn(&MockCall) -> MockReply + Send + Sync + 'static) -> Self {
        Self::llm_with_delay(Duration::ZERO, script).await
    }

    /// Like [`MockServer::llm`] but every reply waits `delay` first.
    pub async fn llm_with_delay(
        delay: Duration,
        script: impl Fn(&MockCall) -> MockReply + Send + Sync + 'static,
    ) -> Self {
        let state = Arc::new(LlmState {
            script: Box::new(script),
            delay,
            counters: Counters::default(),
        });
        let router = Router::new()
            .route("/v1/chat/completions", post(chat_handler))
            .with_state(state.clone());
        serve(router, state).await
    }

    pub fn calls(&self) -> u64 {
        self.state.counters.calls.load(Ordering::SeqCst)
    }

    /// Calls that received a successful completion.
    pub fn answered(&self) -> u64 {
        self.state.counters.answered.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> u64 {
        self.state.counters.peak.load(Ordering::SeqCst)
    }

    pub fn calls_per_prompt(&self) -> HashMap<String, u64> {
        self.state.counters.per_prompt.lock().unwrap().clone()
    }

    /// Successful completions per user message.
    pub fn answered_per_prompt(&self) -> HashMap<String, u64> {
        self.state.counters.answered_per_prompt.lock().unwrap().clone()
    }
}

fn completion_body(text: &str, reason: &str) -> Value {
    json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": reason,
        }]
    })
}

async fn chat_handler(State(state): State<Arc<LlmState>>, Json(body): Json<Value>) -> Response {
    let counters = &state.counters;
    let call_index = counters.enter();
    let mut system = None;
    let mut user = String::new();
    for message in body["messages"].as_array().into_iter().flatten() {
        let content = message["content"].as_str().unwrap_or_default().to_string();
        match message["role"].as_str() {
            Some("system") => system = Some(content),
            _ => user = content,
        }
    }
    let prompt_calls = {
        let mut per_prompt = counters.per_prompt.lock().unwrap();
        let count = per_prompt.entry(user.clone()).or_default();
        *count += 1;
        *count - 1
    };
    let call = MockCall {
        model: body["model"].as_str().unwrap_or_default().to_string(),
        system,
        user: user.clone(),
        temperature: body["temperature"].as_f64().unwrap_or(f64::NAN),
        max_tokens: body["max_tokens"].as_u64().unwrap_or(0),
        call_index,
        prompt_calls,
    };
    let reply = (state.script)(&call);
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    let response = match reply {
        MockReply::Hang => std::future::pending::<Response>().await,
        MockReply::Status(code) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(json!({"error": {"message": "scripted failure"}}))).into_response()
        }
        MockReply::Raw(raw) => raw.into_response(),
        MockReply::Text(text) => Json(completion_body(&text, "stop")).into_response(),
        MockReply::TextWithReason(text, reason) => Json(completion_body(&text, &reason)).into_response(),
    };
    if response.status().is_success() {
        counters.answered.fetch_add(1, Ordering::SeqCst);
        *counters.answered_per_prompt.lock().unwrap().entry(user).or_default() += 1;
    }
    counters.leave();
    response
}

/// Reply from a scripted scorer: probabilities or an HTTP status.
pub type ScoreReply = Result<Vec<f64>, u16>;
type ScoreScript = dyn Fn(&str, &[String], u64) -> ScoreReply + Send + Sync;

pub struct ScorerState {
    script: Box<ScoreScript>,
    counters: Counters,
}

pub type MockScorer = MockServer<ScorerState>;

impl MockServer<ScorerState> {
    /// Starts a `/score` + `/healthz` mock. The script receives the query,
    /// the passages and the global call index.
    pub async fn scorer(script: impl Fn(&str, &[String], u64) -> ScoreReply + Send + Sync + 'static) -> Self {
        let state = Arc::new(ScorerState {
            script: Box::new(script),
            counters: Counters::default(),
        });
        let router = Router::new()
            .route("/score", post(score_handler))
            .route("/healthz", get(|| async { StatusCode::OK }))
            .with_state(state.clone());
        serve(router, state).await
    }

    pub fn calls(&self) -> u64 {
        self.state.counters.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> u64 {
        self.state.counters.peak.load(Ordering::SeqCst)
    }
}

async fn score_handler(State(state): State<Arc<ScorerState>>, Json(body): Json<Value>) -> Response {
    let call_index = state.counters.enter();
    let query = body["query"].as_str().unwrap_or_default().to_string();
    let passages: Vec<String> = body["passages"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|p| p.as_str().unwrap_or_default().to_string())
        .collect();
    let reply = (state.script)(&query, &passages, call_index);
    // Yield so concurrent requests overlap and the peak counter sees them.
    tokio::time::sleep(Duration::from_millis(2)).await;
    state.counters.leave();
    match reply {
        Ok(p) => Json(json!({ "p_relevant": p })).into_response(),
        Err(code) => StatusCode::from_u16(code)
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
            .into_response(),
    }
}
