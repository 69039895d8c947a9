//! Blocking JSON-over-HTTP client shared by the remote gateways.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), doubling each time.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    base_url: String,
    client: Client,
    retry: RetryPolicy,
}

/// Outcome of a request that reached the server but was refused.
#[derive(Debug)]
pub(crate) enum Refusal {
    Status(StatusCode, String),
}

impl JsonClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_retry(base_url, RetryPolicy::default())
    }

    pub fn with_retry(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client construction");
        JsonClient {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            client,
            retry,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// POSTs `body` to `path`, retrying transport failures and 5xx responses.
    pub fn post<B, R>(&self, path: &str, body: &B) -> Result<R>
    where
        B: Serialize + ?Sized,
        R: DeserializeOwned,
    {
        match self.try_post(path, body)? {
            Ok(resp) => Ok(resp),
            Err(Refusal::Status(status, text)) => Err(Error::Integrity(format!(
                "{} rejected request with {status}: {text}",
                self.url(path)
            ))),
        }
    }

    pub(crate) fn try_post<B, R>(&self, path: &str, body: &B) -> Result<Result<R, Refusal>>
    where
        B: Serialize + ?Sized,
        R: DeserializeOwned,
    {
        let url = self.url(path);
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(self.retry.backoff(attempt - 1));
            }
            match self.client.post(&url).json(body).send() {
                Ok(resp) if resp.status().is_server_error() => {
                    last = format!("server returned {}", resp.status());
                }
                Ok(resp) if !resp.status().is_success() => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Ok(Err(Refusal::Status(status, text)));
                }
                Ok(resp) => {
                    let bytes = resp.bytes().map_err(|e| Error::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    return serde_json::from_slice(&bytes).map(Ok).map_err(|e| {
                        Error::Integrity(format!("malformed response from {url}: {e}"))
                    });
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("attempt {attempt}/{attempts} to {url} failed: {last}");
        }
        Err(Error::Transport {
            attempts,
            message: format!("{url}: {last}"),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_250ms() {
        let p = RetryPolicy::default();
        assert_eq!(p.attempts, 3);
        assert_eq!(p.backoff(1), Duration::from_millis(250));
        assert_eq!(p.backoff(2), Duration::from_millis(500));
    }

    #[test]
    fn unreachable_endpoint_is_retryable_with_attempt_count() {
        let client = JsonClient::with_retry(
            "http://127.0.0.1:9",
            RetryPolicy {
                attempts: 2,
                initial_backoff: Duration::from_millis(1),
            },
        );
        let err = client
            .post::<_, serde_json::Value>("/v1/embed", &serde_json::json!({}))
            .unwrap_err();
        assert!(err.is_retryable());
        assert!(matches!(err, Error::Transport { attempts: 2, .. }));
    }
}
