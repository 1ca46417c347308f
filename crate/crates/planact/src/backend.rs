//! Chat-model backends: the single abstraction through which planning,
//! grounding, annotation conversion, and judge evaluation reach a language
//! model.
//!
//! Two implementations ship: a generic HTTP chat-completion client (behind
//! the `http` feature) and a scripted mock replaying fixture responses for
//! deterministic tests. A recording wrapper captures request/response pairs
//! to JSONL so live runs can be replayed through the mock.
//!
//! The backend layer never alters whitespace or casing of model output;
//! controllers depend on exact prefixes like `"Subgoal 1:"`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::sync::Mutex;

pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_TEMPERATURE: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::Assistant => f.write_str("assistant"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn user(content: impl Into<String>) -> ChatTurn {
        ChatTurn {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> ChatTurn {
        ChatTurn {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A completion request: user-first turns ending on a user turn (the model
/// is being asked for the next assistant message).
///
/// [`ChatRequest::new`] enforces strict role alternation. Few-shot
/// attachment deliberately produces user→user seams between example
/// episodes and the live conversation, so it builds through the internal
/// unchecked constructor after validating each piece separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub turns: Vec<ChatTurn>,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl ChatRequest {
    pub fn new(turns: Vec<ChatTurn>) -> Result<ChatRequest, BackendError> {
        if turns.is_empty() {
            return Err(BackendError::InvalidRequest("no turns".to_string()));
        }
        if turns[0].role != Role::User {
            return Err(BackendError::InvalidRequest(
                "first turn must be user".to_string(),
            ));
        }
        for window in turns.windows(2) {
            if window[0].role == window[1].role {
                return Err(BackendError::InvalidRequest(
                    "roles must alternate".to_string(),
                ));
            }
        }
        if turns.last().map(|t| t.role) != Some(Role::User) {
            return Err(BackendError::InvalidRequest(
                "request must end with a user turn".to_string(),
            ));
        }
        if turns.iter().any(|t| t.content.is_empty()) {
            return Err(BackendError::InvalidRequest(
                "turn content must be non-empty".to_string(),
            ));
        }
        Ok(ChatRequest::from_turns_unchecked(turns))
    }

    pub(crate) fn from_turns_unchecked(turns: Vec<ChatTurn>) -> ChatRequest {
        ChatRequest {
            turns,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn with_limits(mut self, max_tokens: u32, temperature: f32) -> ChatRequest {
        self.max_tokens = max_tokens;
        self.temperature = temperature;
        self
    }

    /// Comma-joined role names, e.g. `"user,assistant,user"`.
    pub fn role_sequence(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.role.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    HttpChatCompletion,
    ScriptedMock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendId {
    pub name: String,
    pub kind: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP error {status}: {detail}")]
    Http { status: u16, detail: String },
    #[error("scripted mock has no response left")]
    FixtureExhausted,
    #[error("request hash {actual} does not match recorded hash {expected}")]
    FixtureMismatch { expected: String, actual: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("I/O error: {0}")]
    Io(String),
}

/// Stable fingerprint of a request's conversation: SHA-256 over the role
/// and content of each turn. Decoding parameters are excluded; replay
/// matching is about the conversation itself.
pub fn request_hash(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for turn in &request.turns {
        hasher.update(turn.role.to_string().as_bytes());
        hasher.update([0x1f]);
        hasher.update(turn.content.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
    fn id(&self) -> BackendId;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockResponse {
    pub text: String,
    /// When present, the incoming request's hash must equal this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
}

/// Fixture-driven backend. Responses are consumed in order; in strict mode
/// each fixture carries the hash of the request it was recorded against and
/// any divergence fails the replay.
///
/// The queue is serialized internally; ordinal matching requires order, so
/// one mock instance serves one episode at a time.
pub struct ScriptedMock {
    name: String,
    queue: Mutex<VecDeque<MockResponse>>,
}

impl ScriptedMock {
    /// Responses matched by position only.
    pub fn ordinal(name: impl Into<String>, responses: Vec<String>) -> ScriptedMock {
        ScriptedMock {
            name: name.into(),
            queue: Mutex::new(
                responses
                    .into_iter()
                    .map(|text| MockResponse {
                        text,
                        request_hash: None,
                    })
                    .collect(),
            ),
        }
    }

    /// Responses carrying recorded request hashes; replay divergence is an
    /// error.
    pub fn strict(name: impl Into<String>, responses: Vec<MockResponse>) -> ScriptedMock {
        ScriptedMock {
            name: name.into(),
            queue: Mutex::new(responses.into_iter().collect()),
        }
    }

    /// Builds a strict mock from recorded transcript entries.
    pub fn from_transcript(name: impl Into<String>, entries: &[TranscriptEntry]) -> ScriptedMock {
        ScriptedMock::strict(
            name,
            entries
                .iter()
                .map(|e| MockResponse {
                    text: e.response.clone(),
                    request_hash: Some(e.request_hash.clone()),
                })
                .collect(),
        )
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("mock queue poisoned").len()
    }
}

impl Backend for ScriptedMock {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut queue = self.queue.lock().expect("mock queue poisoned");
        let next = queue.pop_front().ok_or(BackendError::FixtureExhausted)?;
        if let Some(expected) = next.request_hash {
            let actual = request_hash(request);
            if actual != expected {
                return Err(BackendError::FixtureMismatch { expected, actual });
            }
        }
        Ok(next.text)
    }

    fn id(&self) -> BackendId {
        BackendId {
            name: self.name.clone(),
            kind: BackendKind::ScriptedMock,
        }
    }
}

/// One line of a recorded transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role_sequence: String,
    pub request_hash: String,
    pub response: String,
    pub backend: String,
    /// Unix time in milliseconds at recording. Transcripts are recording
    /// artifacts, not golden outputs, so wall-clock here is fine.
    pub timestamp: u64,
}

/// Wraps a backend so every request/response pair is appended to a JSONL
/// sink. Responses pass through unchanged; sink failures abort the call.
pub struct RecordingBackend<B> {
    inner: B,
    sink: Mutex<Box<dyn Write + Send>>,
}

/// See [`RecordingBackend`].
pub fn record_transcript<B: Backend>(backend: B, sink: Box<dyn Write + Send>) -> RecordingBackend<B> {
    RecordingBackend {
        inner: backend,
        sink: Mutex::new(sink),
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let response = self.inner.complete(request)?;
        let entry = TranscriptEntry {
            role_sequence: request.role_sequence(),
            request_hash: request_hash(request),
            response: response.clone(),
            backend: self.inner.id().name,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| BackendError::Io(format!("cannot encode transcript entry: {e}")))?;
        let mut sink = self.sink.lock().expect("transcript sink poisoned");
        writeln!(sink, "{line}").map_err(|e| BackendError::Io(e.to_string()))?;
        sink.flush().map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(response)
    }

    fn id(&self) -> BackendId {
        self.inner.id()
    }
}

/// Parses a JSONL transcript produced by [`RecordingBackend`].
pub fn load_transcript(text: &str) -> Result<Vec<TranscriptEntry>, BackendError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| BackendError::Io(format!("bad transcript line: {e}"))))
        .collect()
}

#[cfg(feature = "http")]
pub use http::HttpChatCompletion;

#[cfg(feature = "http")]
mod http {
    use super::*;
    use std::time::Duration;

    /// Generic chat-completion client. One configurable endpoint and model
    /// name cover hosted APIs and locally served fine-tuned modules alike;
    /// planner and grounder may point at different backends.
    pub struct HttpChatCompletion {
        pub name: String,
        pub endpoint: String,
        pub model: String,
        /// Environment variable holding a bearer token, if needed.
        pub auth_env: Option<String>,
        pub timeout: Duration,
    }

    impl HttpChatCompletion {
        pub fn new(
            name: impl Into<String>,
            endpoint: impl Into<String>,
            model: impl Into<String>,
            timeout: Duration,
        ) -> Self {
            HttpChatCompletion {
                name: name.into(),
                endpoint: endpoint.into(),
                model: model.into(),
                auth_env: None,
                timeout,
            }
        }

        fn attempt(&self, request: &ChatRequest) -> Result<String, BackendError> {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(self.timeout))
                .build()
                .into();
            let mut call = agent.post(&self.endpoint);
            if let Some(var) = &self.auth_env {
                if let Ok(token) = std::env::var(var) {
                    call = call.header("Authorization", &format!("Bearer {token}"));
                }
            }
            let messages: Vec<serde_json::Value> = request
                .turns
                .iter()
                .map(|t| serde_json::json!({ "role": t.role.to_string(), "content": t.content }))
                .collect();
            let body = serde_json::json!({
                "model": self.model,
                "messages": messages,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
            });
            match call.send_json(&body) {
                Ok(mut resp) => {
                    let parsed: serde_json::Value = resp
                        .body_mut()
                        .read_json()
                        .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
                    parsed
                        .pointer("/choices/0/message/content")
                        .and_then(|v| v.as_str())
                        .map(str::to_string)
                        .ok_or_else(|| {
                            BackendError::Transport("response missing choices[0].message.content".to_string())
                        })
                }
                Err(ureq::Error::StatusCode(status)) => Err(BackendError::Http {
                    status,
                    detail: "chat completion request rejected".to_string(),
                }),
                Err(ureq::Error::Timeout(_)) => Err(BackendError::Timeout),
                Err(other) => Err(BackendError::Transport(other.to_string())),
            }
        }

        fn retryable(error: &BackendError) -> bool {
            matches!(
                error,
                BackendError::Transport(_) | BackendError::Http { status: 500..=599, .. }
            )
        }
    }

    impl Backend for HttpChatCompletion {
        fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
            match self.attempt(request) {
                Ok(text) => Ok(text),
                Err(e) if Self::retryable(&e) => self.attempt(request),
                Err(e) => Err(e),
            }
        }

        fn id(&self) -> BackendId {
            BackendId {
                name: self.name.clone(),
                kind: BackendKind::HttpChatCompletion,
            }
        }
    }
}
