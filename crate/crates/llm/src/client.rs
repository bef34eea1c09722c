use std::sync::Arc;
use std::time::Duration;

use asmscribe_core::metrics::{MetricError, ScoredSequence};
use reqwest::Url;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub const ENV_BACKEND_URL: &str = "REX86_BACKEND_URL";
pub const ENV_EMBED_URL: &str = "REX86_EMBED_URL";
pub const ENV_API_KEY: &str = "REX86_API_KEY";

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend returned {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("backend cannot score references: {0}")]
    UnsupportedBackend(String),
    #[error("cannot delimit the reference tokens: {0}")]
    TokenBoundaryMismatch(String),
    #[error("reference continuation is empty")]
    EmptyReference,
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("embedding dimensions differ within a batch: {expected} vs {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unexpected response shape: {0}")]
    InvalidResponse(String),
    #[error("could not parse the model response")]
    UnparseableResponse { raw: String },
    #[error("response still malformed after {attempts} attempts: {error}")]
    MalformedAfterRetries { raw: String, attempts: u32, error: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            LlmError::BackendUnreachable(_) | LlmError::Timeout => true,
            LlmError::BackendError { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { temperature: 0.0, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub base_url: Url,
    pub model_name: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub sampling: Sampling,
}

impl BackendConfig {
    pub fn new(base_url: &str, model_name: &str) -> Result<Self, LlmError> {
        let mut url = Url::parse(base_url).map_err(|e| LlmError::InvalidConfig(format!("{base_url}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(LlmError::InvalidConfig(format!("unsupported scheme in {base_url}")));
        }
        // treat a bare host and a /v1 suffix the same way
        let trimmed = url.path().trim_end_matches('/').trim_end_matches("/v1").to_string();
        url.set_path(&format!("{trimmed}/"));
        Ok(BackendConfig {
            base_url: url,
            model_name: model_name.to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            sampling: Sampling::default(),
        })
    }

    /// Uses `url` when given, else the named environment variable. The API key comes from the environment.
    pub fn from_env_or(url: Option<&str>, env_var: &str, model_name: &str) -> Result<Self, LlmError> {
        let from_env = std::env::var(env_var).ok();
        let base = url
            .map(str::to_string)
            .or(from_env)
            .ok_or_else(|| LlmError::InvalidConfig(format!("no backend URL given and {env_var} is unset")))?;
        let mut cfg = BackendConfig::new(&base, model_name)?;
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, LlmError> {
        if timeout.is_zero() {
            return Err(LlmError::InvalidConfig("timeout must be positive".into()));
        }
        self.timeout = timeout;
        Ok(self)
    }

    fn endpoint(&self, path: &str) -> Url {
        self.base_url.join(&format!("v1/{path}")).expect("static endpoint path")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage { role: role.to_string(), content: content.into() }
    }
}

/// Shareable handle; clones share the in-flight cap.
#[derive(Debug, Clone)]
pub struct InferenceClient {
    cfg: Arc<BackendConfig>,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl InferenceClient {
    pub fn new(cfg: BackendConfig) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LlmError::InvalidConfig(e.to_string()))?;
        let permits = Arc::new(Semaphore::new(cfg.max_in_flight.max(1)));
        Ok(InferenceClient { cfg: Arc::new(cfg), http, permits })
    }

    /// Same backend and in-flight cap, different model name.
    pub fn with_model(&self, model_name: &str) -> InferenceClient {
        let mut cfg = (*self.cfg).clone();
        cfg.model_name = model_name.to_string();
        InferenceClient { cfg: Arc::new(cfg), http: self.http.clone(), permits: self.permits.clone() }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    async fn attempt(&self, path: &str, body: Option<&Value>) -> Result<Value, LlmError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let url = self.cfg.endpoint(path);
        let mut req = match body {
            Some(b) => self.http.post(url).json(b),
            None => self.http.get(url),
        };
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(classify)?;
        let status = resp.status();
        let text = resp.text().await.map_err(classify)?;
        if !status.is_success() {
            return Err(LlmError::BackendError { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::InvalidResponse(format!("{e}: {text}")))
    }

    async fn request(&self, path: &str, body: Option<Value>) -> Result<Value, LlmError> {
        let mut delay = self.cfg.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(path, body.as_ref()).await {
                Err(e) if e.is_transient() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    /// Chat completion; returns the first choice's text.
    pub async fn chat(&self, messages: &[ChatMessage], sampling: Sampling) -> Result<String, LlmError> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_tokens,
        });
        let v = self.request("chat/completions", Some(body)).await?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::InvalidResponse("missing choices[0].message.content".into()))
    }

    pub async fn generate(&self, system: Option<&str>, prompt: &str) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(ChatMessage::new("system", s));
        }
        messages.push(ChatMessage::new("user", prompt));
        self.chat(&messages, self.cfg.sampling).await
    }

    /// Raw text completion of `prompt`, with no chat template applied by the server.
    pub async fn complete(&self, prompt: &str, sampling: Sampling) -> Result<String, LlmError> {
        let body = json!({
            "model": self.cfg.model_name,
            "prompt": prompt,
            "temperature": sampling.temperature,
            "max_tokens": sampling.max_tokens,
        });
        let v = self.request("completions", Some(body)).await?;
        v.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::InvalidResponse("missing choices[0].text".into()))
    }

    /// Teacher-forced log-probabilities of `reference` following `prompt`.
    pub async fn score_reference(&self, prompt: &str, reference: &str) -> Result<ScoredSequence, LlmError> {
        if reference.is_empty() {
            return Err(LlmError::EmptyReference);
        }
        let body = json!({
            "model": self.cfg.model_name,
            "prompt": format!("{prompt}{reference}"),
            "echo": true,
            "logprobs": 1,
            "max_tokens": 1,
            "temperature": 0.0,
        });
        let v = self.request("completions", Some(body)).await?;
        let lp = v
            .pointer("/choices/0/logprobs")
            .filter(|l| !l.is_null())
            .ok_or_else(|| LlmError::UnsupportedBackend("response carries no logprobs".into()))?;
        let strings = |key: &str| -> Option<Vec<Value>> { lp.get(key).and_then(Value::as_array).cloned() };
        let (Some(tokens), Some(logprobs), Some(offsets)) =
            (strings("tokens"), strings("token_logprobs"), strings("text_offset"))
        else {
            return Err(LlmError::UnsupportedBackend("echoed logprobs lack tokens, token_logprobs or text_offset".into()));
        };
        if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
            return Err(LlmError::InvalidResponse("logprob arrays differ in length".into()));
        }

        let start = prompt.chars().count() as u64;
        let end = start + reference.chars().count() as u64;
        let offsets: Vec<u64> = offsets
            .iter()
            .map(|o| o.as_u64().ok_or_else(|| LlmError::InvalidResponse(format!("bad text_offset {o}"))))
            .collect::<Result<_, _>>()?;
        if !offsets.contains(&start) {
            return Err(LlmError::TokenBoundaryMismatch(format!("no token starts at character {start}")));
        }
        let mut texts = Vec::new();
        let mut values = Vec::new();
        for i in (0..tokens.len()).filter(|i| (start..end).contains(&offsets[*i])) {
            let value = logprobs[i]
                .as_f64()
                .ok_or_else(|| LlmError::UnsupportedBackend(format!("token {i} of the reference has no logprob")))?;
            texts.push(tokens[i].as_str().unwrap_or_default().to_string());
            values.push(value);
        }
        if let Some(last) = offsets.iter().copied().filter(|o| *o < end).max() {
            let i = offsets.iter().position(|o| *o == last).expect("offset present");
            let piece_end = last + tokens[i].as_str().map_or(0, |t| t.chars().count() as u64);
            if piece_end > end {
                return Err(LlmError::TokenBoundaryMismatch("last reference token runs past the reference".into()));
            }
        }
        Ok(ScoredSequence::new(texts, values)?)
    }

    /// One vector per text, in input order.
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyInput("embedding batch"));
        }
        let body = json!({ "model": self.cfg.model_name, "input": texts });
        let v = self.request("embeddings", Some(body)).await?;
        let data: Vec<EmbeddingDatum> = v
            .get("data")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| LlmError::InvalidResponse(e.to_string()))?
            .ok_or_else(|| LlmError::InvalidResponse("missing data".into()))?;
        if data.len() != texts.len() {
            return Err(LlmError::InvalidResponse(format!("{} embeddings for {} texts", data.len(), texts.len())));
        }
        let mut data = data;
        data.sort_by_key(|d| d.index);
        let expected = data[0].embedding.len();
        if let Some(bad) = data.iter().find(|d| d.embedding.len() != expected) {
            return Err(LlmError::DimensionMismatch { expected, found: bad.embedding.len() });
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }

    /// The backend's `/v1/models` document, unmodified.
    pub async fn list_models(&self) -> Result<Value, LlmError> {
        self.request("models", None).await
    }

    /// Single unretried probe of the models endpoint.
    pub async fn is_reachable(&self) -> bool {
        self.attempt("models", None).await.is_ok()
    }
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

fn classify(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::BackendUnreachable(e.to_string())
    }
}
