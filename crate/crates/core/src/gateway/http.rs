//! Chat-completions / embeddings HTTP backend with retry and backoff.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AnalyzerBackend, AnalyzerRequest, Completion, EmbedOutput, EmbedderBackend, RequestDigests};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "PERSONADB_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(20));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    /// POSTs a JSON body. `Err` is a transport-level failure (connection, timeout).
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str)
        -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
    ) -> std::result::Result<HttpResponse, String> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_string(body) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| e.to_string())?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpResponse {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(e) => Err(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embed_model: String,
    pub dims: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-3.5-turbo-0613".into(),
            embed_model: "text-embedding-ada-002".into(),
            dims: 1536,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

/// Shared HTTP plumbing for both backends.
pub struct HttpClient {
    cfg: HttpConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    sleep: fn(Duration),
}

impl HttpClient {
    pub fn new(cfg: HttpConfig, api_key: Option<String>, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            cfg,
            api_key,
            transport,
            sleep: std::thread::sleep,
        }
    }

    /// Reads the bearer token from `PERSONADB_API_KEY`.
    pub fn from_env(cfg: HttpConfig) -> Self {
        let timeout = Duration::from_secs(cfg.timeout_secs.max(1));
        Self::new(
            cfg,
            std::env::var(API_KEY_ENV).ok(),
            Arc::new(UreqTransport::new(timeout)),
        )
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// POSTs to `{base_url}/{path}`, retrying 429, 5xx and transport errors.
    /// Returns the parsed body and the number of attempts made.
    pub fn post(&self, path: &str, body: &Value) -> Result<(Value, u32)> {
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
        let body = body.to_string();
        let max = self.cfg.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.transport.post_json(&url, self.api_key.as_deref(), &body) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let v: Value = serde_json::from_str(&resp.body)?;
                    return Ok((v, attempt));
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("HTTP {}: {}", resp.status, truncate(&resp.body));
                }
                Ok(resp) => {
                    return Err(Error::BackendUnavailable {
                        attempts: attempt,
                        reason: format!("HTTP {}: {}", resp.status, truncate(&resp.body)),
                    });
                }
                Err(e) => last = e,
            }
            if attempt < max {
                (self.sleep)(self.cfg.retry.delay(attempt));
            }
        }
        Err(Error::BackendUnavailable {
            attempts: max,
            reason: last,
        })
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub struct HttpAnalyzer {
    client: Arc<HttpClient>,
}

impl HttpAnalyzer {
    pub fn new(client: Arc<HttpClient>) -> Self {
        Self { client }
    }
}

impl AnalyzerBackend for HttpAnalyzer {
    fn complete(&self, req: &AnalyzerRequest, _digests: &RequestDigests) -> Result<Completion> {
        let mut body = json!({
            "model": self.client.cfg.chat_model,
            "messages": [{ "role": "user", "content": req.rendered_prompt }],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let (resp, attempts) = self.client.post("chat/completions", &body)?;
        let choice = &resp["choices"][0];
        if choice["finish_reason"] == "length" {
            return Err(Error::OutputTruncated(req.prompt_name.clone()));
        }
        let text = choice["message"]["content"]
            .as_str()
            .ok_or_else(|| Error::BackendUnavailable {
                attempts,
                reason: "response has no choices[0].message.content".into(),
            })?
            .to_string();
        Ok(Completion { text, attempts })
    }
}

pub struct HttpEmbedder {
    client: Arc<HttpClient>,
}

impl HttpEmbedder {
    pub fn new(client: Arc<HttpClient>) -> Self {
        Self { client }
    }
}

impl EmbedderBackend for HttpEmbedder {
    fn embed(&self, _prompt_name: &str, prompt: &str, text: &str) -> Result<EmbedOutput> {
        let input = if prompt.is_empty() {
            text.to_string()
        } else {
            format!("{prompt}\n\n{text}")
        };
        let body = json!({ "model": self.client.cfg.embed_model, "input": input });
        let (resp, attempts) = self.client.post("embeddings", &body)?;
        let values: Vec<f64> = serde_json::from_value(resp["data"][0]["embedding"].clone())
            .map_err(|_| Error::BackendUnavailable {
                attempts,
                reason: "response has no data[0].embedding".into(),
            })?;
        Ok(EmbedOutput { values, attempts })
    }

    fn dims(&self) -> usize {
        self.client.cfg.dims
    }

    fn model_tag(&self) -> String {
        format!("http:{}", self.client.cfg.embed_model)
    }
}
