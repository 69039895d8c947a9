//! Text generation backends.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::http::{JsonClient, RetryPolicy};
use crate::rag::{CONTEXT_PREAMBLE, CONTEXT_SEPARATOR, QUESTION_PREFIX};

/// Raw generation output as returned by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    /// Token count reported by the server, if any.
    pub usage_tokens: Option<u64>,
}

pub trait Generator: Send + Sync {
    fn model(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<Generation>;
}

/// Offline test double. With context it answers with the top-ranked
/// context block verbatim; without context it repeats the question.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoGenerator;

impl EchoGenerator {
    pub fn echo(prompt: &str) -> String {
        let body = prompt.strip_suffix("\nAnswer:").unwrap_or(prompt);
        if let Some(rest) = body.strip_prefix(CONTEXT_PREAMBLE) {
            let context = match rest.rfind(&format!("\n\n{QUESTION_PREFIX}")) {
                Some(end) => &rest[..end],
                None => rest,
            };
            let first = context.split(CONTEXT_SEPARATOR).next().unwrap_or(context);
            return first.to_owned();
        }
        match body.rfind(QUESTION_PREFIX) {
            Some(i) => body[i + QUESTION_PREFIX.len()..].to_owned(),
            None => body.lines().last().unwrap_or_default().to_owned(),
        }
    }
}

impl Generator for EchoGenerator {
    fn model(&self) -> &str {
        "echo"
    }

    fn generate(&self, prompt: &str) -> Result<Generation> {
        Ok(Generation {
            text: Self::echo(prompt),
            usage_tokens: None,
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    tokens: Option<u64>,
}

/// Client for the `/v1/chat` wire contract.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: JsonClient,
    model: String,
}

impl HttpGenerator {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::with_retry(base_url, model, RetryPolicy::default())
    }

    pub fn with_retry(
        base_url: impl Into<String>,
        model: impl Into<String>,
        retry: RetryPolicy,
    ) -> Self {
        HttpGenerator {
            client: JsonClient::with_retry(base_url, retry),
            model: model.into(),
        }
    }
}

impl Generator for HttpGenerator {
    fn model(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str) -> Result<Generation> {
        let resp: ChatResponse = self.client.post(
            "/v1/chat",
            &ChatRequest {
                model: &self.model,
                prompt,
            },
        )?;
        Ok(Generation {
            text: resp.text,
            usage_tokens: resp.usage.and_then(|u| u.tokens),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rag::build_prompt;

    #[test]
    fn echo_returns_question_without_context() {
        assert_eq!(EchoGenerator::echo(&build_prompt("how?", &[])), "how?");
    }

    #[test]
    fn echo_returns_top_context_block() {
        let p = build_prompt("q", &["first chunk\nline two", "second"]);
        assert_eq!(EchoGenerator::echo(&p), "first chunk\nline two");
        let p = build_prompt("q", &["only"]);
        assert_eq!(EchoGenerator::echo(&p), "only");
    }
}
