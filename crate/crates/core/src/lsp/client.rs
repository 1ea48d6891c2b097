use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Decompose,
    Paraphrase,
}

/// One completion request. `subject` is the description the prompt is
/// about; real clients only send `prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub kind: RequestKind,
    pub subject: String,
    pub prompt: String,
}

pub trait LlmClient: Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String>;
}

/// Replies looked up by `(kind, subject)`; unknown requests fail.
#[derive(Debug, Default)]
pub struct MockClient {
    table: HashMap<(RequestKind, String), String>,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reply(mut self, kind: RequestKind, subject: &str, reply: &str) -> Self {
        self.table.insert((kind, subject.to_string()), reply.to_string());
        self
    }

    /// Number of `complete` calls so far, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for MockClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.table
            .get(&(request.kind, request.subject.clone()))
            .cloned()
            .ok_or_else(|| {
                Error::LspUnavailable(format!("mock has no {:?} reply for {:?}", request.kind, request.subject))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub timeout: Duration,
    pub decompose_temperature: f64,
    pub paraphrase_temperature: f64,
}

impl HttpConfig {
    pub const ENV_API_KEY: &'static str = "ZOMG_LLM_API_KEY";
    pub const ENV_BASE_URL: &'static str = "ZOMG_LLM_BASE_URL";
    pub const ENV_MODEL: &'static str = "ZOMG_LLM_MODEL";

    /// Reads the endpoint from the environment; the base URL and model are required.
    pub fn from_env(max_retries: u32, timeout: Duration) -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let base_url = var(Self::ENV_BASE_URL)
            .ok_or_else(|| Error::LspUnavailable(format!("{} is not set", Self::ENV_BASE_URL)))?;
        let model = var(Self::ENV_MODEL).ok_or_else(|| Error::LspUnavailable(format!("{} is not set", Self::ENV_MODEL)))?;
        Ok(Self {
            base_url,
            api_key: var(Self::ENV_API_KEY),
            model,
            max_retries,
            timeout,
            decompose_temperature: 0.0,
            paraphrase_temperature: 0.7,
        })
    }
}

/// Client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpChatClient {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, Attempt> {
        let mut req = self.agent.post(&self.endpoint()).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| Attempt::Retry(format!("transport error: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading response: {e}")))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(Attempt::Retry(format!("HTTP {status}: {text}"))),
            _ => return Err(Attempt::Fatal(format!("HTTP {status}: {text}"))),
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("unexpected response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal("response has no choices".into()))
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        let temperature = match request.kind {
            RequestKind::Decompose => self.cfg.decompose_temperature,
            RequestKind::Paraphrase => self.cfg.paraphrase_temperature,
        };
        let body = serde_json::to_string(&ChatRequest {
            model: &self.cfg.model,
            temperature,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
        })?;
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            debug!("{:?} request, attempt {}", request.kind, attempt + 1);
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(msg)) => return Err(Error::LspUnavailable(msg)),
                Err(Attempt::Retry(msg)) => {
                    warn!("LLM request failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::LspUnavailable(format!(
            "gave up after {} attempts: {last}",
            self.cfg.max_retries + 1
        )))
    }
}
