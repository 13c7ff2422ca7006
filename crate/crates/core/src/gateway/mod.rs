//! Uniform access to the analyzer (text in, text out) and the embedder
//! (prompt + text in, vector out).
//!
//! Every call goes through [`Gateway`], which validates the request, applies the
//! rate limit, routes embeddings through the content-addressed cache and writes one
//! journal entry per call.

pub mod http;
pub mod journal;
mod ratelimit;
pub mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

pub use journal::{CallOp, Journal, JournalEntry, JournalEvent};
pub use ratelimit::RateLimiter;
pub use scripted::{BagOfWords, Responder, ScriptedAnalyzer, ScriptedEmbedder, Transcript, TranscriptMode};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::parallel::map_bounded;
use crate::store::{EmbeddingCache, EmbeddingCacheKey, EmbeddingVector};

/// Embedding prompt used to match users by their cache layer.
pub const JOIN_PROMPT: &str = "join";
/// Embedding prompt used for query and candidate texts during retrieval.
pub const RETRIEVAL_PROMPT: &str = "retrieval";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzerRequest {
    pub prompt_name: String,
    pub rendered_prompt: String,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_output_tokens: u32,
    /// Task this call serves; carried for responders and the journal, never digested.
    #[serde(skip)]
    pub task_id: Option<String>,
}

impl AnalyzerRequest {
    /// Temperature 0, seed 0 and a 1024-token output cap.
    pub fn new(prompt_name: impl Into<String>, rendered_prompt: impl Into<String>) -> Self {
        Self {
            prompt_name: prompt_name.into(),
            rendered_prompt: rendered_prompt.into(),
            temperature: 0.0,
            seed: Some(0),
            max_output_tokens: 1024,
            task_id: None,
        }
    }

    pub fn with_task(mut self, task_id: impl Into<String>) -> Self {
        self.task_id = Some(task_id.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if self.rendered_prompt.trim().is_empty() {
            return Err(Error::InvalidRequest("rendered_prompt is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(Error::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// The two digests of an analyzer request: `full` covers every field, `relaxed`
/// only the prompt name and text so transcripts survive seed/temperature changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestDigests {
    pub full: String,
    pub relaxed: String,
}

impl RequestDigests {
    pub fn of(req: &AnalyzerRequest) -> Self {
        Self {
            full: json_digest(req),
            relaxed: json_digest(&serde_json::json!({
                "prompt_name": req.prompt_name,
                "rendered_prompt": req.rendered_prompt,
            })),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedRequest {
    pub prompt_name: String,
    pub text: String,
}

impl EmbedRequest {
    pub fn new(prompt_name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            prompt_name: prompt_name.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub values: Vec<f64>,
    pub attempts: u32,
}

pub trait AnalyzerBackend: Send + Sync {
    fn complete(&self, req: &AnalyzerRequest, digests: &RequestDigests) -> Result<Completion>;

    /// Deterministic backends journal zero latency so journals are reproducible.
    fn deterministic(&self) -> bool {
        false
    }
}

pub trait EmbedderBackend: Send + Sync {
    fn embed(&self, prompt_name: &str, prompt: &str, text: &str) -> Result<EmbedOutput>;
    fn dims(&self) -> usize;
    fn model_tag(&self) -> String;
    fn deterministic(&self) -> bool {
        false
    }
}

pub fn default_embed_prompts() -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            JOIN_PROMPT.to_string(),
            "Represent this user persona for finding users with similar values and interests:"
                .to_string(),
        ),
        (
            RETRIEVAL_PROMPT.to_string(),
            "Represent this text for retrieving evidence about how a user will react:".to_string(),
        ),
    ])
}

pub struct Gateway {
    analyzer: Box<dyn AnalyzerBackend>,
    embedder: Box<dyn EmbedderBackend>,
    cache: EmbeddingCache,
    journal: Arc<Journal>,
    limiter: Option<RateLimiter>,
    embed_prompts: BTreeMap<String, String>,
}

impl Gateway {
    pub fn new(
        analyzer: Box<dyn AnalyzerBackend>,
        embedder: Box<dyn EmbedderBackend>,
        cache: EmbeddingCache,
    ) -> Result<Self> {
        if cache.dims() != embedder.dims() {
            return Err(Error::DimensionMismatch {
                expected: cache.dims(),
                actual: embedder.dims(),
            });
        }
        Ok(Self {
            analyzer,
            embedder,
            cache,
            journal: Arc::new(Journal::new()),
            limiter: None,
            embed_prompts: default_embed_prompts(),
        })
    }

    /// Scripted analyzer + bag-of-words embedder with an in-memory cache.
    pub fn scripted(analyzer: ScriptedAnalyzer, bow: BagOfWords) -> Self {
        let dims = bow.dims();
        Self::new(
            Box::new(analyzer),
            Box::new(ScriptedEmbedder::BagOfWords(bow)),
            EmbeddingCache::in_memory(dims),
        )
        .expect("dims agree by construction")
    }

    pub fn with_journal(mut self, journal: Arc<Journal>) -> Self {
        self.journal = journal;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: u32) -> Self {
        self.limiter = Some(RateLimiter::per_minute(requests_per_minute));
        self
    }

    pub fn with_embed_prompt(mut self, name: impl Into<String>, prompt: impl Into<String>) -> Self {
        self.embed_prompts.insert(name.into(), prompt.into());
        self
    }

    pub fn journal(&self) -> &Arc<Journal> {
        &self.journal
    }

    pub fn dims(&self) -> usize {
        self.cache.dims()
    }

    pub fn embed_model_tag(&self) -> String {
        self.embedder.model_tag()
    }

    pub fn analyze(&self, req: &AnalyzerRequest) -> Result<String> {
        req.validate()?;
        let digests = RequestDigests::of(req);
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let started = Instant::now();
        let result = self.analyzer.complete(req, &digests).and_then(|c| {
            if c.text.trim().is_empty() {
                Err(Error::BackendUnavailable {
                    attempts: c.attempts,
                    reason: "empty response".into(),
                })
            } else {
                Ok(c)
            }
        });
        let latency_ms = if self.analyzer.deterministic() {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        let (outcome, attempts, response) = match &result {
            Ok(c) => ("ok".to_string(), c.attempts, Some(c.text.clone())),
            Err(e) => (e.kind().to_string(), attempts_of(e), None),
        };
        self.journal.record(JournalEvent::Call {
            op: CallOp::Analyze,
            prompt_name: req.prompt_name.clone(),
            request_digest: digests.full,
            latency_ms,
            attempts,
            cache_hit: false,
            outcome,
            task_id: req.task_id.clone(),
            response,
        });
        result.map(|c| c.text)
    }

    pub fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        if req.text.trim().is_empty() {
            return Err(Error::InvalidRequest("embed text is empty".into()));
        }
        let prompt = self.embed_prompts.get(&req.prompt_name).ok_or_else(|| {
            Error::InvalidRequest(format!("no embedding prompt named `{}`", req.prompt_name))
        })?;
        let tag = self.embedder.model_tag();
        let key = EmbeddingCacheKey::new(&tag, prompt, &req.text);
        let started = Instant::now();
        let mut attempts = 0;
        let result = self.cache.get_or_compute(&key, &tag, || {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            let out = self.embedder.embed(&req.prompt_name, prompt, &req.text)?;
            attempts = out.attempts;
            Ok(out.values)
        });
        let latency_ms = if self.embedder.deterministic() {
            0
        } else {
            started.elapsed().as_millis() as u64
        };
        let (outcome, cache_hit) = match &result {
            Ok((_, hit)) => ("ok".to_string(), *hit),
            Err(e) => (e.kind().to_string(), false),
        };
        if let Err(e) = &result {
            attempts = attempts.max(attempts_of(e));
        }
        self.journal.record(JournalEvent::Call {
            op: CallOp::Embed,
            prompt_name: req.prompt_name.clone(),
            request_digest: key.digest,
            latency_ms,
            attempts,
            cache_hit,
            outcome,
            task_id: None,
            response: None,
        });
        result.map(|(v, _)| v)
    }

    /// Embeds every request with at most `max_in_flight` outstanding. Per-item
    /// failures are returned in place.
    pub fn embed_batch(
        &self,
        reqs: &[EmbedRequest],
        max_in_flight: usize,
    ) -> Result<Vec<Result<EmbeddingVector>>> {
        if max_in_flight == 0 {
            return Err(Error::InvalidRequest("max_in_flight must be at least 1".into()));
        }
        Ok(map_bounded(reqs, max_in_flight, |r| self.embed(r)))
    }
}

fn attempts_of(e: &Error) -> u32 {
    match e {
        Error::BackendUnavailable { attempts, .. } => *attempts,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    use super::*;
    use crate::gateway::http::{HttpAnalyzer, HttpClient, HttpConfig, HttpResponse, HttpTransport, RetryPolicy};

    fn bow() -> BagOfWords {
        BagOfWords::new(["a", "b", "solar", "energy"]).unwrap()
    }

    #[test]
    fn transcript_passthrough_and_miss() {
        let req = AnalyzerRequest::new("predict", "prompt text");
        let d = RequestDigests::of(&req);
        let mut t = Transcript::new(TranscriptMode::Strict);
        t.insert(d.full.clone(), "ok");
        let gw = Gateway::scripted(ScriptedAnalyzer::new(t), bow());
        assert_eq!(gw.analyze(&req).unwrap(), "ok");

        let other = AnalyzerRequest::new("predict", "something else");
        assert!(matches!(gw.analyze(&other), Err(Error::TranscriptMiss(_))));

        // strict mode digests the seed too
        let mut reseeded = req.clone();
        reseeded.seed = Some(9);
        assert!(matches!(gw.analyze(&reseeded), Err(Error::TranscriptMiss(_))));
        let outcomes: Vec<_> = gw
            .journal()
            .entries()
            .into_iter()
            .map(|e| match e.event {
                JournalEvent::Call { outcome, .. } => outcome,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(outcomes, ["ok", "TranscriptMiss", "TranscriptMiss"]);
    }

    #[test]
    fn fallback_ignores_seed_and_temperature() {
        let req = AnalyzerRequest::new("predict", "prompt text");
        let mut t = Transcript::new(TranscriptMode::Fallback);
        t.insert(RequestDigests::of(&req).relaxed, "ok");
        let gw = Gateway::scripted(ScriptedAnalyzer::new(t), bow());
        let mut tweaked = req.clone();
        tweaked.seed = Some(42);
        tweaked.temperature = 0.7;
        assert_eq!(gw.analyze(&tweaked).unwrap(), "ok");
    }

    #[test]
    fn invalid_requests() {
        let gw = Gateway::scripted(
            ScriptedAnalyzer::responder_only(Arc::new(|_: &AnalyzerRequest| Some("x".to_string()))),
            bow(),
        );
        assert!(matches!(
            gw.analyze(&AnalyzerRequest::new("p", "  ")),
            Err(Error::InvalidRequest(_))
        ));
        let mut hot = AnalyzerRequest::new("p", "x");
        hot.temperature = 2.5;
        assert!(gw.analyze(&hot).is_err());
        assert!(matches!(
            gw.embed(&EmbedRequest::new(RETRIEVAL_PROMPT, "")),
            Err(Error::InvalidRequest(_))
        ));
    }

    #[test]
    fn embed_is_cached() {
        let gw = Gateway::scripted(ScriptedAnalyzer::new(Transcript::default()), bow());
        let r = EmbedRequest::new(RETRIEVAL_PROMPT, "solar energy");
        let a = gw.embed(&r).unwrap();
        let b = gw.embed(&r).unwrap();
        assert_eq!(a, b);
        assert_eq!(gw.journal().backend_calls(CallOp::Embed, RETRIEVAL_PROMPT), 1);
        assert_eq!(gw.journal().len(), 2);
        // a different prompt is a different cache key
        gw.embed(&EmbedRequest::new(JOIN_PROMPT, "solar energy")).unwrap();
        assert_eq!(gw.journal().backend_calls(CallOp::Embed, JOIN_PROMPT), 1);
    }

    struct Counting {
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl EmbedderBackend for Counting {
        fn embed(&self, _: &str, _: &str, text: &str) -> Result<EmbedOutput> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            if text == "fail" {
                return Err(Error::BackendUnavailable {
                    attempts: 1,
                    reason: "boom".into(),
                });
            }
            Ok(EmbedOutput {
                values: vec![text.len() as f64],
                attempts: 1,
            })
        }
        fn dims(&self) -> usize {
            1
        }
        fn model_tag(&self) -> String {
            "count".into()
        }
    }

    #[test]
    fn batch_order_bound_and_partial_failure() {
        let counting = Arc::new(Counting {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        struct Shared(Arc<Counting>);
        impl EmbedderBackend for Shared {
            fn embed(&self, a: &str, b: &str, c: &str) -> Result<EmbedOutput> {
                self.0.embed(a, b, c)
            }
            fn dims(&self) -> usize {
                1
            }
            fn model_tag(&self) -> String {
                "count".into()
            }
        }
        let gw = Gateway::new(
            Box::new(ScriptedAnalyzer::new(Transcript::default())),
            Box::new(Shared(counting.clone())),
            EmbeddingCache::in_memory(1),
        )
        .unwrap();
        let reqs: Vec<_> = ["a", "bb", "ccc", "dddd", "eeeee"]
            .iter()
            .map(|t| EmbedRequest::new(RETRIEVAL_PROMPT, *t))
            .collect();
        let out = gw.embed_batch(&reqs, 2).unwrap();
        let lens: Vec<f64> = out.iter().map(|r| r.as_ref().unwrap().values[0]).collect();
        assert_eq!(lens, [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(counting.peak.load(Ordering::SeqCst) <= 2);

        let reqs: Vec<_> = ["x", "fail", "y"]
            .iter()
            .map(|t| EmbedRequest::new(RETRIEVAL_PROMPT, *t))
            .collect();
        let out = gw.embed_batch(&reqs, 3).unwrap();
        assert!(out[0].is_ok() && out[1].is_err() && out[2].is_ok());
        assert!(gw.embed_batch(&[], 1).unwrap().is_empty());
        assert!(gw.embed_batch(&[], 0).is_err());
    }

    struct TwoThrottles(Mutex<u32>);
    impl HttpTransport for TwoThrottles {
        fn post_json(&self, _: &str, _: Option<&str>, _: &str) -> std::result::Result<HttpResponse, String> {
            let mut n = self.0.lock().unwrap();
            *n += 1;
            Ok(if *n <= 2 {
                HttpResponse { status: 429, body: String::new() }
            } else {
                HttpResponse {
                    status: 200,
                    body: r#"{"choices":[{"message":{"content":"done"},"finish_reason":"stop"}]}"#.into(),
                }
            })
        }
    }

    #[test]
    fn http_retries_are_journaled_once() {
        let cfg = HttpConfig {
            retry: RetryPolicy {
                max_attempts: 4,
                base_delay_ms: 0,
                max_delay_ms: 0,
            },
            ..HttpConfig::default()
        };
        let client = Arc::new(
            HttpClient::new(cfg, None, Arc::new(TwoThrottles(Mutex::new(0)))).with_sleep(|_| {}),
        );
        let gw = Gateway::new(
            Box::new(HttpAnalyzer::new(client)),
            Box::new(ScriptedEmbedder::BagOfWords(bow())),
            EmbeddingCache::in_memory(4),
        )
        .unwrap();
        assert_eq!(gw.analyze(&AnalyzerRequest::new("p", "hi")).unwrap(), "done");
        let calls = gw.journal().entries();
        assert_eq!(calls.len(), 1);
        assert!(matches!(calls[0].event, JournalEvent::Call { attempts: 3, .. }));
    }
}
