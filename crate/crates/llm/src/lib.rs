//! Async access to OpenAI-compatible inference backends and the workflows built on it.

pub mod assist;
pub mod client;
pub mod eval;
#[cfg(feature = "mock")]
pub mod mock;
pub mod qa;

pub use client::{BackendConfig, ChatMessage, InferenceClient, LlmError, Sampling};
