//! Scriptable OpenAI-compatible server for tests.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

#[derive(Debug, Clone, PartialEq)]
pub struct MockReply {
    pub status: u16,
    pub body: Value,
}

impl MockReply {
    pub fn ok(body: Value) -> Self {
        MockReply { status: 200, body }
    }

    pub fn error(status: u16, message: &str) -> Self {
        MockReply { status, body: json!({ "error": { "message": message } }) }
    }
}

type Handler = Arc<dyn Fn(&str, &Value) -> MockReply + Send + Sync>;

#[derive(Clone)]
struct Shared {
    handler: Handler,
    log: Arc<Mutex<Vec<(String, Value)>>>,
}

pub struct MockBackend {
    pub url: String,
    log: Arc<Mutex<Vec<(String, Value)>>>,
    task: JoinHandle<()>,
}

async fn dispatch(State(shared): State<Shared>, uri: Uri, body: Bytes) -> Response {
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let path = uri.path().to_string();
    shared.log.lock().unwrap().push((path.clone(), body.clone()));
    let reply = (shared.handler)(&path, &body);
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, axum::Json(reply.body)).into_response()
}

impl MockBackend {
    /// Serves `handler(path, json_body)` on a random loopback port.
    pub async fn start(handler: impl Fn(&str, &Value) -> MockReply + Send + Sync + 'static) -> Self {
        let log = Arc::new(Mutex::new(Vec::new()));
        let shared = Shared { handler: Arc::new(handler), log: log.clone() };
        let app = Router::new().fallback(dispatch).with_state(shared);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind mock");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let task = tokio::spawn(async move {
            axum::serve(listener, app).await.ok();
        });
        MockBackend { url, log, task }
    }

    /// A well-behaved backend; see [`openai_handler`].
    pub async fn openai(
        reply: impl Fn(&str) -> String + Send + Sync + 'static,
        logprob: impl Fn(&str) -> f64 + Send + Sync + 'static,
    ) -> Self {
        MockBackend::start(openai_handler(reply, logprob)).await
    }

    pub fn requests(&self) -> Vec<(String, Value)> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self, path: &str) -> usize {
        self.log.lock().unwrap().iter().filter(|(p, _)| p == path).count()
    }
}

impl Drop for MockBackend {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// URL of a loopback port with nothing listening.
pub async fn dead_url() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}

pub fn chat_response(text: &str) -> Value {
    json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "choices": [{ "index": 0, "message": { "role": "assistant", "content": text }, "finish_reason": "stop" }],
    })
}

pub fn completion_response(text: &str) -> Value {
    json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "choices": [{ "index": 0, "text": text, "logprobs": null, "finish_reason": "stop" }],
    })
}

/// Echo response with one token per character of `text`, then one generated token.
pub fn char_logprobs_response(text: &str, logprob: impl Fn(&str) -> f64) -> Value {
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    let mut offsets = Vec::new();
    for (i, c) in text.chars().enumerate() {
        let t = c.to_string();
        values.push(if i == 0 { Value::Null } else { json!(logprob(&t)) });
        tokens.push(t);
        offsets.push(i);
    }
    tokens.push("<gen>".to_string());
    values.push(json!(-0.1));
    offsets.push(text.chars().count());
    json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": format!("{text}<gen>"),
            "logprobs": { "tokens": tokens, "token_logprobs": values, "text_offset": offsets, "top_logprobs": null },
            "finish_reason": "length",
        }],
    })
}

pub fn embedding_response(vectors: &[Vec<f64>]) -> Value {
    let data: Vec<Value> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| json!({ "object": "embedding", "index": i, "embedding": v }))
        .collect();
    json!({ "object": "list", "data": data })
}

/// Deterministic embedding: character histogram plus a constant bias term.
pub fn char_embedding(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 32];
    v[0] = 1.0;
    for b in text.bytes() {
        v[1 + (b as usize) % 31] += 1.0;
    }
    v
}

/// Chat and plain completions answer `reply(last prompt)`, echo scoring uses a
/// character tokenizer with `logprob(token)`, embeddings use [`char_embedding`].
pub fn openai_handler(
    reply: impl Fn(&str) -> String + Send + Sync + 'static,
    logprob: impl Fn(&str) -> f64 + Send + Sync + 'static,
) -> impl Fn(&str, &Value) -> MockReply + Send + Sync + 'static {
    move |path, body| match path {
        "/v1/models" => MockReply::ok(json!({ "object": "list", "data": [{ "id": "mock-model", "object": "model" }] })),
        "/v1/chat/completions" => {
            let last = body
                .pointer("/messages")
                .and_then(Value::as_array)
                .and_then(|m| m.last())
                .and_then(|m| m.get("content"))
                .and_then(Value::as_str)
                .unwrap_or_default();
            MockReply::ok(chat_response(&reply(last)))
        }
        "/v1/completions" => {
            let prompt = body.get("prompt").and_then(Value::as_str).unwrap_or_default();
            if body.get("echo").and_then(Value::as_bool) == Some(true) {
                MockReply::ok(char_logprobs_response(prompt, &logprob))
            } else {
                MockReply::ok(completion_response(&reply(prompt)))
            }
        }
        "/v1/embeddings" => {
            let texts: Vec<&str> = match body.get("input") {
                Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).collect(),
                Some(Value::String(s)) => vec![s.as_str()],
                _ => Vec::new(),
            };
            MockReply::ok(embedding_response(&texts.iter().map(|t| char_embedding(t)).collect::<Vec<_>>()))
        }
        _ => MockReply::error(404, "no such endpoint"),
    }
}
