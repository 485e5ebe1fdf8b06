//! Provider-agnostic chat completion: request/response types, the [`Backend`]
//! trait, retry, record/replay and an HTTP backend for chat-completions endpoints.

mod http;
mod replay;
mod retry;

pub use http::{HttpBackend, API_BASE_ENV, API_KEY_ENV, DEFAULT_API_BASE, FALLBACK_API_KEY_ENV};
pub use replay::{
    record, RecordedResponse, RecordingBackend, ReplayBackend, ReplayEntry, ReplayStore, REPLAY_FORMAT, REPLAY_VERSION,
};
pub use retry::{complete_with_retry, RetryPolicy, RetryingBackend};

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
    /// Provenance (`case/strategy/trial/role`); not part of the fingerprint.
    pub request_tag: String,
}

/// Stable identity of a request's content, used as the replay key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(pub String);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl ChatRequest {
    /// SHA-256 over model, system text, user text and temperature in hundredths.
    pub fn fingerprint(&self) -> Fingerprint {
        let centi = (self.temperature * 100.0).round() as i64;
        let mut hasher = Sha256::new();
        for part in [
            self.model_id.as_bytes(),
            self.system_text.as_bytes(),
            self.user_text.as_bytes(),
            centi.to_string().as_bytes(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        Fingerprint(hex::encode(hasher.finalize()))
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest {
                tag: self.request_tag.clone(),
                message: "user_text is empty".into(),
            });
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest {
                tag: self.request_tag.clone(),
                message: format!("temperature {} outside [0, 2]", self.temperature),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Complete,
    Truncated,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ChatResponse {
    pub fn complete(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Complete,
            usage: None,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("[{tag}] network failure: {message}")]
    Network { tag: String, message: String },
    #[error("[{tag}] rate limited (retry after {retry_after_secs:?}s)")]
    RateLimited { tag: String, retry_after_secs: Option<u64> },
    #[error("[{tag}] server error {status}: {message}")]
    Server { tag: String, status: u16, message: String },
    #[error("[{tag}] authentication failed: {message}")]
    Auth { tag: String, message: String },
    #[error("[{tag}] provider rejected request ({status}): {message}")]
    Provider { tag: String, status: u16, message: String },
    #[error("[{tag}] malformed provider response: {message}")]
    MalformedResponse { tag: String, message: String },
    #[error("[{tag}] no recorded response for fingerprint {fingerprint}")]
    FingerprintMiss { tag: String, fingerprint: Fingerprint },
    #[error("[{tag}] all {recorded} recorded responses for fingerprint {fingerprint} already consumed")]
    ReplayExhausted {
        tag: String,
        fingerprint: Fingerprint,
        recorded: usize,
    },
    #[error("[{tag}] invalid request: {message}")]
    InvalidRequest { tag: String, message: String },
    #[error("[{tag}] gave up after {attempts} attempts: {last}")]
    ExhaustedRetries {
        tag: String,
        attempts: u32,
        last: Box<LlmError>,
    },
    #[error("[{tag}] injected fault")]
    Injected { tag: String },
}

impl LlmError {
    /// Rate limits, network and server errors may succeed on a later attempt.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            LlmError::Network { .. } | LlmError::RateLimited { .. } | LlmError::Server { .. }
        )
    }

    pub fn is_auth(&self) -> bool {
        match self {
            LlmError::Auth { .. } => true,
            LlmError::ExhaustedRetries { last, .. } => last.is_auth(),
            _ => false,
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            LlmError::Network { tag, .. }
            | LlmError::RateLimited { tag, .. }
            | LlmError::Server { tag, .. }
            | LlmError::Auth { tag, .. }
            | LlmError::Provider { tag, .. }
            | LlmError::MalformedResponse { tag, .. }
            | LlmError::FingerprintMiss { tag, .. }
            | LlmError::ReplayExhausted { tag, .. }
            | LlmError::InvalidRequest { tag, .. }
            | LlmError::ExhaustedRetries { tag, .. }
            | LlmError::Injected { tag } => tag,
        }
    }
}

/// Anything that turns a [`ChatRequest`] into a [`ChatResponse`].
///
/// Implementations must be shareable across threads.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Completes a batch, returning results in request order.
    ///
    /// `concurrent` is a hint; backends whose semantics depend on call order
    /// (replay cursors, recording) override this to stay deterministic.
    fn complete_batch(&self, requests: &[ChatRequest], concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        par::map_slice(requests, concurrent, |r| self.complete(r))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn complete_batch(&self, requests: &[ChatRequest], concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        (**self).complete_batch(requests, concurrent)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn complete_batch(&self, requests: &[ChatRequest], concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        (**self).complete_batch(requests, concurrent)
    }
}

/// Validates the request, then forwards it to the backend.
pub fn complete(request: &ChatRequest, backend: &dyn Backend) -> Result<ChatResponse, LlmError> {
    request.validate()?;
    backend.complete(request)
}

/// Wraps a backend and fails every request whose tag contains one of the
/// given substrings. The inner backend is still called first so replay
/// cursors advance exactly as they would without the fault.
pub struct FaultInjector<B> {
    inner: B,
    failing: BTreeSet<String>,
    injected: AtomicUsize,
}

impl<B: Backend> FaultInjector<B> {
    pub fn new<I, S>(inner: B, failing_tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            inner,
            failing: failing_tags.into_iter().map(Into::into).collect(),
            injected: AtomicUsize::new(0),
        }
    }

    pub fn injected(&self) -> usize {
        self.injected.load(Ordering::SeqCst)
    }

    fn should_fail(&self, request: &ChatRequest) -> bool {
        self.failing.iter().any(|t| request.request_tag.contains(t.as_str()))
    }
}

impl<B: Backend> Backend for FaultInjector<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let result = self.inner.complete(request);
        if self.should_fail(request) {
            self.injected.fetch_add(1, Ordering::SeqCst);
            return Err(LlmError::Injected {
                tag: request.request_tag.clone(),
            });
        }
        result
    }

    fn complete_batch(&self, requests: &[ChatRequest], concurrent: bool) -> Vec<Result<ChatResponse, LlmError>> {
        let results = self.inner.complete_batch(requests, concurrent);
        requests
            .iter()
            .zip(results)
            .map(|(req, res)| {
                if self.should_fail(req) {
                    self.injected.fetch_add(1, Ordering::SeqCst);
                    Err(LlmError::Injected {
                        tag: req.request_tag.clone(),
                    })
                } else {
                    res
                }
            })
            .collect()
    }
}

/// Backend driven by a closure; the building block for scripted fixtures.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, LlmError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (self.0)(request)
    }
}
