use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatTranscript, ContestError, Role};
use crate::windowing::Label;

pub const DEFAULT_FINALIZATION_QUERY: &str =
    "FINALIZATION REQUEST: considering all evidence above, state your final decision. Answer with exactly one word: control or treatment.";
pub const STRICT_FINALIZATION_QUERY: &str =
    "FINALIZATION REQUEST: your previous reply did not contain a decision. Reply with exactly one word and nothing else: control or treatment.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    /// Base URL of a chat-completions compatible API; `/chat/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_ref: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrent_requests: usize,
    /// Send the case id in the request's `user` field.
    pub send_case_ref: bool,
    pub finalization_query: String,
    pub strict_finalization_query: String,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8089/v1".into(),
            model_name: "mock".into(),
            api_key_ref: None,
            max_tokens: 2048,
            temperature: 0.8,
            top_p: 0.1,
            timeout_s: 120.0,
            max_retries: 2,
            backoff_ms: 250,
            max_concurrent_requests: 4,
            send_case_ref: true,
            finalization_query: DEFAULT_FINALIZATION_QUERY.into(),
            strict_finalization_query: STRICT_FINALIZATION_QUERY.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub message: ChoiceMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

/// Latency and throughput of one reply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatMetrics {
    /// Seconds until the response started arriving.
    pub rtt: f64,
    /// Output tokens per second.
    pub tps: f64,
    pub toks: u64,
    /// Seconds from request to complete reply.
    pub output_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub content: String,
    pub metrics: ChatMetrics,
}

/// Something that turns a chat request into a reply.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, ContestError>;
}

fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn metrics(rtt: f64, output_time: f64, toks: u64) -> ChatMetrics {
    let output_time = output_time.max(1e-6);
    ChatMetrics {
        rtt,
        tps: toks as f64 / output_time,
        toks,
        output_time,
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking HTTP client for chat-completions style endpoints.
pub struct HttpChatClient {
    config: LlmEndpointConfig,
    http: reqwest::blocking::Client,
    slots: Semaphore,
}

impl HttpChatClient {
    pub fn new(config: LlmEndpointConfig) -> Result<Self, ContestError> {
        if !(config.timeout_s > 0.0) {
            return Err(ContestError::Config("timeout_s must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| ContestError::Config(e.to_string()))?;
        let slots = Semaphore {
            free: Mutex::new(config.max_concurrent_requests.max(1)),
            cv: Condvar::new(),
        };
        Ok(Self { config, http, slots })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &ChatRequest) -> Result<Completion, ContestError> {
        let mut req = self.http.post(self.url()).json(request);
        if let Some(var) = &self.config.api_key_ref {
            let key = std::env::var(var).map_err(|_| ContestError::Config(format!("API key variable `{var}` is not set")))?;
            req = req.bearer_auth(key);
        }
        let start = Instant::now();
        let resp = req.send().map_err(|e| ContestError::Transport {
            attempts: 1,
            message: e.without_url().to_string(),
        })?;
        let rtt = start.elapsed().as_secs_f64();
        let status = resp.status();
        let body = resp.text().map_err(|e| ContestError::Transport {
            attempts: 1,
            message: e.without_url().to_string(),
        })?;
        let output_time = start.elapsed().as_secs_f64();
        if !status.is_success() {
            return Err(ContestError::Endpoint {
                status: status.as_u16(),
                excerpt: body.chars().take(200).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| ContestError::Parse(format!("chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ContestError::Parse("chat response has no choices".into()))?;
        let toks = parsed
            .usage
            .and_then(|u| u.completion_tokens)
            .unwrap_or_else(|| count_tokens(&choice.message.content));
        Ok(Completion {
            content: choice.message.content,
            metrics: metrics(rtt, output_time, toks),
        })
    }
}

impl ChatBackend for HttpChatClient {
    /// Transport failures are retried up to `max_retries` times with
    /// doubling backoff; endpoint and parse errors are returned at once.
    fn complete(&self, request: &ChatRequest) -> Result<Completion, ContestError> {
        let _slot = self.slots.acquire();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Err(ContestError::Transport { message, .. }) => {
                    if attempts > self.config.max_retries {
                        return Err(ContestError::Transport { attempts, message });
                    }
                    log::warn!("chat request failed (attempt {attempts}): {message}; retrying");
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }
}

/// Scripted outcome for one case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedOutcome {
    /// Keep the prior prediction.
    Retain,
    /// Answer with the other label.
    Overturn,
    /// Never name a label.
    Undetermined,
}

/// Deterministic replies keyed by the request's `user` field (the case id).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub cases: BTreeMap<String, ScriptedOutcome>,
    /// Outcome for cases without an entry; retain when unset.
    #[serde(default)]
    pub default: Option<ScriptedOutcome>,
}

/// Prior prediction quoted in the first user message.
fn prior_prediction(request: &ChatRequest) -> Option<Label> {
    let first = request.messages.iter().find(|m| m.role == Role::User)?;
    let line = first.content.lines().find(|l| l.contains("Prior AI Prediction:"))?;
    let value = line.split(':').nth(1)?.trim().trim_end_matches('.');
    value.parse().ok()
}

impl MockScript {
    pub fn outcome(&self, case_ref: Option<&str>) -> ScriptedOutcome {
        case_ref
            .and_then(|c| self.cases.get(c).copied())
            .or(self.default)
            .unwrap_or(ScriptedOutcome::Retain)
    }

    /// Reply text for a request. Finalization requests get a decision line;
    /// anything else gets a short analysis that names no label.
    pub fn reply(&self, request: &ChatRequest) -> String {
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let outcome = self.outcome(request.user.as_deref());
        if !last.starts_with("FINALIZATION REQUEST") {
            return "Reviewed the baseline and regional HRV metrics. Time-domain variability and the LF/HF balance are summarized above; ask for finalization when ready.".into();
        }
        let prior = prior_prediction(request);
        let decision = match (outcome, prior) {
            (ScriptedOutcome::Undetermined, _) | (_, None) => None,
            (ScriptedOutcome::Retain, Some(p)) => Some(p),
            (ScriptedOutcome::Overturn, Some(Label::Control)) => Some(Label::Treatment),
            (ScriptedOutcome::Overturn, Some(Label::Treatment)) => Some(Label::Control),
        };
        match (decision, outcome) {
            (None, _) => "The evidence is mixed and I am unable to commit to a single class.".into(),
            (Some(d), ScriptedOutcome::Overturn) => format!(
                "The regional discrepancies and the overall autonomic pattern do not support the prior prediction, so I am changing it.\nFINAL DECISION: {d}"
            ),
            (Some(d), _) => format!("The metrics are consistent with the prior prediction.\nFINAL DECISION: {d}"),
        }
    }

    pub fn response(&self, request: &ChatRequest) -> ChatResponse {
        let content = self.reply(request);
        let completion_tokens = Some(count_tokens(&content));
        ChatResponse {
            choices: vec![Choice {
                index: 0,
                message: ChoiceMessage {
                    role: Role::Assistant,
                    content,
                },
                finish_reason: Some("stop".into()),
            }],
            usage: Some(Usage {
                prompt_tokens: Some(request.messages.iter().map(|m| count_tokens(&m.content)).sum()),
                completion_tokens,
            }),
        }
    }
}

/// In-process backend answering from a [`MockScript`].
pub struct ScriptedClient {
    pub script: MockScript,
}

impl ChatBackend for ScriptedClient {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, ContestError> {
        let start = Instant::now();
        let content = self.script.reply(request);
        let elapsed = start.elapsed().as_secs_f64();
        let toks = count_tokens(&content);
        Ok(Completion {
            content,
            metrics: metrics(elapsed, elapsed, toks),
        })
    }
}

/// Send the transcript plus `message`; on success both the user message
/// and the reply are appended to the transcript.
pub fn chat(
    backend: &dyn ChatBackend,
    config: &LlmEndpointConfig,
    transcript: &mut ChatTranscript,
    message: &str,
    case_ref: Option<&str>,
) -> Result<(String, ChatMetrics), ContestError> {
    let mut messages: Vec<WireMessage> = transcript
        .messages()
        .iter()
        .map(|m| WireMessage {
            role: m.role,
            content: m.content.clone(),
        })
        .collect();
    messages.push(WireMessage {
        role: Role::User,
        content: message.to_string(),
    });
    let request = ChatRequest {
        model: config.model_name.clone(),
        messages,
        max_tokens: config.max_tokens,
        temperature: config.temperature,
        top_p: config.top_p,
        user: if config.send_case_ref { case_ref.map(str::to_string) } else { None },
    };
    let completion = backend.complete(&request)?;
    transcript.push(ChatMessage::new(Role::User, message))?;
    let mut reply = ChatMessage::new(Role::Assistant, completion.content.clone());
    reply.latency_ms = Some(completion.metrics.output_time * 1000.0);
    reply.token_count = Some(completion.metrics.toks);
    transcript.push(reply)?;
    Ok((completion.content, completion.metrics))
}
