use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use asmscribe_core::annotate::{
    chunk_ranges, parse_line_comment_json, AnnotationRequest, AnnotationResult, CHUNK_MAX_LINES, CHUNK_OVERLAP,
};
use asmscribe_core::asm::{parse_sample, render};
use asmscribe_core::metrics::alpaca_prompt;
use asmscribe_core::tasks::Task;
use serde::{Deserialize, Serialize};

use crate::client::{ChatMessage, InferenceClient, LlmError, Sampling};

pub const DEFAULT_CHAT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_CONTEXT_BUDGET: usize = 4096;

/// Text the model sees for `task`. Code tasks other than completion get the comment-free
/// listing, so line numbers in results refer to that text.
pub fn model_input(task: Task, code: &str) -> Result<String, LlmError> {
    if code.trim().is_empty() {
        return Err(LlmError::EmptyInput("code"));
    }
    match task {
        Task::QA => Ok(code.trim().to_string()),
        Task::CompleteTheCode => Ok(code.trim_end().to_string()),
        _ => parse_sample(code, "request")
            .map(|s| render(&s, false, false))
            .map_err(|e| LlmError::InvalidInput(e.to_string())),
    }
}

/// Runs one annotation request against the backend.
pub async fn annotate(client: &InferenceClient, req: &AnnotationRequest) -> Result<AnnotationResult, LlmError> {
    let input = model_input(req.task, &req.code)?;
    let sampling = Sampling { temperature: req.options.temperature, max_tokens: req.options.max_tokens };

    if req.task != Task::InlineComments {
        let raw = client.complete(&alpaca_prompt(req.task.prompt(), &input), sampling).await?;
        return Ok(AnnotationResult {
            task: req.task,
            text: Some(raw.trim().to_string()),
            line_comments: None,
            raw_response: raw,
            attempts: 1,
            dropped_keys: 0,
            listing: Some(input),
        });
    }

    let lines: Vec<&str> = input.split('\n').collect();
    let mut comments = BTreeMap::new();
    let mut raws = Vec::new();
    let mut attempts = 0;
    let mut dropped = 0;
    for range in chunk_ranges(&lines, CHUNK_MAX_LINES, CHUNK_OVERLAP) {
        let chunk = lines[range.clone()].join("\n");
        let prompt = alpaca_prompt(Task::InlineComments.prompt(), &chunk);
        let mut tries = 0;
        let parsed = loop {
            tries += 1;
            attempts += 1;
            let raw = client.complete(&prompt, sampling).await?;
            match parse_line_comment_json(&raw, range.len()) {
                Ok(p) => {
                    raws.push(raw);
                    break p;
                }
                Err(e) if tries > req.options.retries_on_malformed => {
                    return Err(LlmError::MalformedAfterRetries { raw, attempts: tries, error: e.to_string() });
                }
                Err(_) => {}
            }
        };
        dropped += parsed.dropped;
        for (line, text) in parsed.comments {
            comments.entry(range.start + line).or_insert(text);
        }
    }
    Ok(AnnotationResult {
        task: Task::InlineComments,
        text: None,
        line_comments: Some(comments),
        raw_response: raws.join("\n\n"),
        attempts,
        dropped_keys: dropped,
        listing: Some(input),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    /// Unix seconds.
    pub created_at: u64,
    pub model: String,
    pub transcript: Vec<ChatMessage>,
}

impl ChatSession {
    pub fn new(session_id: impl Into<String>, model: impl Into<String>, system: Option<&str>) -> Self {
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        ChatSession {
            session_id: session_id.into(),
            created_at,
            model: model.into(),
            transcript: system.map(|s| ChatMessage::new("system", s)).into_iter().collect(),
        }
    }

    pub fn system(&self) -> Option<&ChatMessage> {
        self.transcript.first().filter(|m| m.role == "system")
    }

    /// Messages after the system prompt.
    pub fn history(&self) -> &[ChatMessage] {
        let skip = usize::from(self.system().is_some());
        &self.transcript[skip..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatOptions {
    pub sampling: Sampling,
    /// Approximate prompt budget in tokens.
    pub context_budget: usize,
}

impl Default for ChatOptions {
    fn default() -> Self {
        ChatOptions {
            sampling: Sampling { temperature: DEFAULT_CHAT_TEMPERATURE, max_tokens: 512 },
            context_budget: DEFAULT_CONTEXT_BUDGET,
        }
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Messages to send for the next turn: the system prompt and the new message always,
/// then as many of the most recent exchanges as fit in `budget`.
pub fn context_window(session: &ChatSession, user_msg: &str, budget: usize) -> Vec<ChatMessage> {
    let system = session.system().cloned();
    let mut used = system.as_ref().map_or(0, |m| estimate_tokens(&m.content)) + estimate_tokens(user_msg);
    let mut kept: Vec<&[ChatMessage]> = Vec::new();
    for exchange in session.history().rchunks(2) {
        let cost: usize = exchange.iter().map(|m| estimate_tokens(&m.content)).sum();
        if used + cost > budget {
            break;
        }
        used += cost;
        kept.push(exchange);
    }
    system
        .into_iter()
        .chain(kept.into_iter().rev().flatten().cloned())
        .chain(std::iter::once(ChatMessage::new("user", user_msg)))
        .collect()
}

/// Sends one user message; the session is only touched once the reply arrives.
pub async fn chat_turn(
    client: &InferenceClient,
    session: &mut ChatSession,
    user_msg: &str,
    opts: ChatOptions,
) -> Result<String, LlmError> {
    if user_msg.trim().is_empty() {
        return Err(LlmError::EmptyInput("message"));
    }
    let messages = context_window(session, user_msg, opts.context_budget);
    let reply = client.chat(&messages, opts.sampling).await?;
    session.transcript.push(ChatMessage::new("user", user_msg));
    session.transcript.push(ChatMessage::new("assistant", reply.clone()));
    Ok(reply)
}
