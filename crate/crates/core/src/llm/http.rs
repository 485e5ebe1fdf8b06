use std::env;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{Backend, ChatRequest, ChatResponse, FinishReason, LlmError, Usage};

pub const API_BASE_ENV: &str = "LENSAUDIT_API_BASE";
pub const API_KEY_ENV: &str = "LENSAUDIT_API_KEY";
pub const FALLBACK_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

/// Chat-completions client (`POST {base}/chat/completions`, bearer auth).
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    base_url: String,
    api_key: String,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Result<Self, LlmError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| LlmError::Network {
                tag: String::new(),
                message: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
        })
    }

    /// Reads the endpoint from `LENSAUDIT_API_BASE` and the credential from
    /// `LENSAUDIT_API_KEY` (falling back to `OPENAI_API_KEY`).
    pub fn from_env() -> Result<Self, LlmError> {
        let base = env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        let key = env::var(API_KEY_ENV)
            .or_else(|_| env::var(FALLBACK_API_KEY_ENV))
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::Auth {
                tag: String::new(),
                message: format!("no credential: set {API_KEY_ENV} or {FALLBACK_API_KEY_ENV}"),
            })?;
        Self::new(base, key)
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    fn body(request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let tag = request.request_tag.clone();
        let resp = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(&Self::body(request))
            .send()
            .map_err(|e| LlmError::Network {
                tag: tag.clone(),
                message: e.to_string(),
            })?;

        let status = resp.status();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok());
        let text = resp.text().map_err(|e| LlmError::Network {
            tag: tag.clone(),
            message: e.to_string(),
        })?;

        if !status.is_success() {
            return Err(match status {
                StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => LlmError::Auth { tag, message: text },
                StatusCode::TOO_MANY_REQUESTS => LlmError::RateLimited {
                    tag,
                    retry_after_secs: retry_after,
                },
                s if s.is_server_error() || s == StatusCode::REQUEST_TIMEOUT => LlmError::Server {
                    tag,
                    status: s.as_u16(),
                    message: text,
                },
                s => LlmError::Provider {
                    tag,
                    status: s.as_u16(),
                    message: text,
                },
            });
        }

        let body: CompletionBody = serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse {
            tag: tag.clone(),
            message: e.to_string(),
        })?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::MalformedResponse {
                tag: tag.clone(),
                message: "response has no choices".into(),
            })?;
        let content = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Truncated,
            _ if content.is_empty() => FinishReason::Error,
            _ => FinishReason::Complete,
        };
        Ok(ChatResponse {
            text: content,
            finish_reason,
            usage: body.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}
