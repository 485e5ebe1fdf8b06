use std::thread;
use std::time::Duration;

use tracing::warn;

use super::{Backend, ChatRequest, ChatResponse, LlmError};

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total calls allowed, including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; handy in tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff: Duration::ZERO,
            multiplier: 1.0,
            max_backoff: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` starts at 1.
    pub fn backoff(&self, attempt: u32, err: &LlmError) -> Duration {
        let exp = self.multiplier.max(1.0).powi(attempt.saturating_sub(1) as i32);
        let mut delay = self.initial_backoff.mul_f64(exp);
        if let LlmError::RateLimited {
            retry_after_secs: Some(secs),
            ..
        } = err
        {
            delay = delay.max(Duration::from_secs(*secs));
        }
        delay.min(self.max_backoff)
    }
}

/// Retries transient errors up to `policy.max_attempts` total calls.
/// Non-transient errors are returned immediately.
pub fn complete_with_retry(
    request: &ChatRequest,
    backend: &dyn Backend,
    policy: &RetryPolicy,
) -> Result<ChatResponse, LlmError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match backend.complete(request) {
            Ok(r) => return Ok(r),
            Err(e) if !e.is_transient() => return Err(e),
            Err(e) if attempt >= max => {
                return Err(LlmError::ExhaustedRetries {
                    tag: request.request_tag.clone(),
                    attempts: attempt,
                    last: Box::new(e),
                })
            }
            Err(e) => {
                let delay = policy.backoff(attempt, &e);
                warn!(tag = %request.request_tag, attempt, ?delay, error = %e, "retrying");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                attempt += 1;
            }
        }
    }
}

/// Backend adapter applying [`complete_with_retry`] to every call.
pub struct RetryingBackend<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: Backend> RetryingBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: Backend> Backend for RetryingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        complete_with_retry(request, &self.inner, &self.policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn request() -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            system_text: String::new(),
            user_text: "u".into(),
            temperature: 0.7,
            max_output_tokens: None,
            request_tag: "case/A/t1/auditor0".into(),
        }
    }

    /// Fails the first `failures` calls with the given error, then succeeds.
    struct Flaky {
        calls: AtomicU32,
        failures: u32,
        error: LlmError,
    }

    impl Flaky {
        fn new(failures: u32, error: LlmError) -> Self {
            Self {
                calls: AtomicU32::new(0),
                failures,
                error,
            }
        }
        fn calls(&self) -> u32 {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl Backend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok(ChatResponse::complete("ok"))
            }
        }
    }

    fn network() -> LlmError {
        LlmError::Network {
            tag: "t".into(),
            message: "reset".into(),
        }
    }

    #[test]
    fn succeeds_on_third_call() {
        let backend = Flaky::new(2, network());
        let r = complete_with_retry(&request(), &backend, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(r.text, "ok");
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let backend = Flaky::new(
            10,
            LlmError::Auth {
                tag: "t".into(),
                message: "bad key".into(),
            },
        );
        let err = complete_with_retry(&request(), &backend, &RetryPolicy::immediate(3)).unwrap_err();
        assert!(err.is_auth());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn always_failing_exhausts_after_max_attempts() {
        let backend = Flaky::new(u32::MAX, network());
        let err = complete_with_retry(&request(), &backend, &RetryPolicy::immediate(3)).unwrap_err();
        match err {
            LlmError::ExhaustedRetries { attempts, last, tag } => {
                assert_eq!(attempts, 3);
                assert!(matches!(*last, LlmError::Network { .. }));
                assert_eq!(tag, "case/A/t1/auditor0");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn zero_attempts_still_calls_once() {
        let backend = Flaky::new(u32::MAX, network());
        assert!(complete_with_retry(&request(), &backend, &RetryPolicy::immediate(0)).is_err());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn backoff_grows_and_respects_retry_after_and_cap() {
        let policy = RetryPolicy {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(100),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(5),
        };
        let e = network();
        assert_eq!(policy.backoff(1, &e), Duration::from_millis(100));
        assert_eq!(policy.backoff(3, &e), Duration::from_millis(400));
        assert_eq!(policy.backoff(20, &e), Duration::from_secs(5));
        let limited = LlmError::RateLimited {
            tag: "t".into(),
            retry_after_secs: Some(2),
        };
        assert_eq!(policy.backoff(1, &limited), Duration::from_secs(2));
    }
}
