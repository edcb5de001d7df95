//! Multi-turn chat with a multimodal model.
//!
//! [`ChatBackend`] is the single-call interface the annotator drives;
//! [`HttpClient`] speaks the chat-completions JSON protocol and
//! [`ScriptedMock`] replays canned completions for tests and dry runs.

mod http;
mod mock;

use std::sync::Arc;

use thiserror::Error;

use crate::imaging::Raster;

pub use http::{ClientConfig, HttpClient, RateLimiter};
pub use mock::{ScriptBook, ScriptedMock};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("invalid conversation: {0}")]
    InvalidHistory(String),
    #[error("script exhausted after {calls} call(s)")]
    ScriptExhausted { calls: usize },
    #[error("client configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    /// Sent over the wire as a base64 PNG data URI.
    Image(Arc<Raster>),
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text(s) => Some(s),
            Part::Image(_) => None,
        }
    }

    pub fn as_image(&self) -> Option<&Raster> {
        match self {
            Part::Image(r) => Some(r),
            Part::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::text(text)],
        }
    }

    /// Text parts joined with newlines.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(Part::as_text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &Raster> {
        self.parts.iter().filter_map(Part::as_image)
    }
}

/// Checks the conversation shape: one leading system message, then user and
/// assistant strictly alternating starting with user, ending on a user turn.
/// Images may only appear in user messages.
pub fn validate_history(history: &[Message]) -> Result<(), ClientError> {
    let bad = |m: String| Err(ClientError::InvalidHistory(m));
    let Some((first, rest)) = history.split_first() else {
        return bad("empty history".into());
    };
    if first.role != Role::System {
        return bad("history must start with a system message".into());
    }
    if rest.is_empty() {
        return bad("history has no user message".into());
    }
    for (i, msg) in rest.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if msg.role != expected {
            return bad(format!(
                "message {} has role {}, expected {}",
                i + 1,
                msg.role.as_str(),
                expected.as_str()
            ));
        }
    }
    for (i, msg) in history.iter().enumerate() {
        if msg.parts.is_empty() {
            return bad(format!("message {i} has no parts"));
        }
        if msg.role != Role::User && msg.images().next().is_some() {
            return bad(format!("image part in {} message {i}", msg.role.as_str()));
        }
    }
    if rest.last().map(|m| m.role) != Some(Role::User) {
        return bad("history must end with a user message".into());
    }
    Ok(())
}

/// One completion per call. Implementations must not mutate `history`.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, history: &[Message]) -> Result<String, ClientError>;
}

/// Hands out a backend for each annotation attempt of a sample.
pub trait BackendProvider: Send + Sync {
    fn backend(&self, sample_id: &str, attempt: u32) -> Result<Arc<dyn ChatBackend>, ClientError>;
}
