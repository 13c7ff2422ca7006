//! Deterministic backends: transcript replay, rule-based responders and a
//! bag-of-words embedder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::journal::{JournalEntry, JournalEvent};
use super::{
    AnalyzerBackend, AnalyzerRequest, Completion, EmbedOutput, EmbedderBackend, RequestDigests,
};
use crate::digest::{json_digest, sha256_hex, short};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    /// Every request must be in the transcript, matched on the full digest.
    Strict,
    /// Matches on the full or the relaxed digest; misses go to the responder.
    #[default]
    Fallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptLine {
    digest: String,
    response: serde_json::Value,
}

/// Canned responses keyed by request digest.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub mode: TranscriptMode,
    entries: HashMap<String, serde_json::Value>,
}

impl Transcript {
    pub fn new(mode: TranscriptMode) -> Self {
        Self {
            mode,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, digest: impl Into<String>, response: impl Into<serde_json::Value>) {
        self.entries.insert(digest.into(), response.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a JSONL file of `{digest, response}` objects.
    pub fn load(path: &Path, mode: TranscriptMode) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut t = Self::new(mode);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: TranscriptLine = serde_json::from_str(&line)?;
            t.entries.insert(l.digest, l.response);
        }
        Ok(t)
    }

    /// Builds a transcript from the successful analyzer calls of a journal.
    pub fn from_journal(entries: &[JournalEntry], mode: TranscriptMode) -> Self {
        let mut t = Self::new(mode);
        for e in entries {
            if let JournalEvent::Call {
                request_digest,
                response: Some(resp),
                outcome,
                ..
            } = &e.event
            {
                if outcome == "ok" {
                    t.insert(request_digest.clone(), resp.clone());
                }
            }
        }
        t
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            serde_json::to_writer(
                &mut out,
                &TranscriptLine {
                    digest: k.clone(),
                    response: self.entries[k].clone(),
                },
            )?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    fn lookup(&self, digests: &RequestDigests) -> Option<&serde_json::Value> {
        self.entries.get(&digests.full).or_else(|| match self.mode {
            TranscriptMode::Fallback => self.entries.get(&digests.relaxed),
            TranscriptMode::Strict => None,
        })
    }
}

/// Rule-based stand-in for an analyzer.
pub trait Responder: Send + Sync {
    /// `None` means the responder does not handle this request.
    fn respond(&self, req: &AnalyzerRequest) -> Option<String>;
}

impl<F> Responder for F
where
    F: Fn(&AnalyzerRequest) -> Option<String> + Send + Sync,
{
    fn respond(&self, req: &AnalyzerRequest) -> Option<String> {
        self(req)
    }
}

/// Analyzer backed by a transcript and, in fallback mode, a responder.
pub struct ScriptedAnalyzer {
    transcript: Transcript,
    responder: Option<Arc<dyn Responder>>,
}

impl ScriptedAnalyzer {
    pub fn new(transcript: Transcript) -> Self {
        Self {
            transcript,
            responder: None,
        }
    }

    pub fn with_responder(mut self, responder: Arc<dyn Responder>) -> Self {
        self.responder = Some(responder);
        self
    }

    /// A fallback-mode analyzer that answers everything through `responder`.
    pub fn responder_only(responder: Arc<dyn Responder>) -> Self {
        Self::new(Transcript::new(TranscriptMode::Fallback)).with_responder(responder)
    }
}

impl AnalyzerBackend for ScriptedAnalyzer {
    fn complete(&self, req: &AnalyzerRequest, digests: &RequestDigests) -> Result<Completion> {
        if let Some(v) = self.transcript.lookup(digests) {
            let text = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            return Ok(Completion { text, attempts: 1 });
        }
        if self.transcript.mode == TranscriptMode::Fallback {
            if let Some(text) = self.responder.as_ref().and_then(|r| r.respond(req)) {
                return Ok(Completion { text, attempts: 1 });
            }
        }
        let key = match self.transcript.mode {
            TranscriptMode::Strict => &digests.full,
            TranscriptMode::Fallback => &digests.relaxed,
        };
        Err(Error::TranscriptMiss(key.clone()))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Splits text into lowercase tokens of alphanumerics and underscores.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Token-count embedder over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct BagOfWords {
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    tag: String,
}

impl BagOfWords {
    pub fn new<I, S>(vocabulary: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vec::new();
        let mut index = HashMap::new();
        for w in vocabulary {
            let w = w.into().to_lowercase();
            if w.is_empty() || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), vocab.len());
            vocab.push(w);
        }
        if vocab.is_empty() {
            return Err(Error::InvalidRequest("empty vocabulary".into()));
        }
        let tag = format!("bow:{}", short(&sha256_hex(vocab.join("\n").as_bytes())));
        Ok(Self {
            vocabulary: vocab,
            index,
            tag,
        })
    }

    /// One token per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn dims(&self) -> usize {
        self.vocabulary.len()
    }

    /// Raw counts; out-of-vocabulary tokens are ignored.
    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for tok in tokenize(text) {
            if let Some(&i) = self.index.get(&tok) {
                v[i] += 1.0;
            }
        }
        v
    }

    /// L2-normalized counts. A text with no vocabulary tokens maps to the zero vector.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = self.counts(text);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

pub enum ScriptedEmbedder {
    BagOfWords(BagOfWords),
    /// Replays vectors keyed by the digest of `{prompt_name, text}`.
    Transcript { transcript: Transcript, dims: usize },
}

pub fn embed_digest(prompt_name: &str, text: &str) -> String {
    json_digest(&serde_json::json!({ "prompt_name": prompt_name, "text": text }))
}

impl EmbedderBackend for ScriptedEmbedder {
    fn embed(&self, prompt_name: &str, _prompt: &str, text: &str) -> Result<EmbedOutput> {
        match self {
            ScriptedEmbedder::BagOfWords(b) => Ok(EmbedOutput {
                values: b.embed(text),
                attempts: 1,
            }),
            ScriptedEmbedder::Transcript { transcript, .. } => {
                let d = embed_digest(prompt_name, text);
                let v = transcript
                    .entries
                    .get(&d)
                    .ok_or_else(|| Error::TranscriptMiss(d.clone()))?;
                let values: Vec<f64> = serde_json::from_value(v.clone())?;
                Ok(EmbedOutput {
                    values,
                    attempts: 1,
                })
            }
        }
    }

    fn dims(&self) -> usize {
        match self {
            ScriptedEmbedder::BagOfWords(b) => b.dims(),
            ScriptedEmbedder::Transcript { dims, .. } => *dims,
        }
    }

    fn model_tag(&self) -> String {
        match self {
            ScriptedEmbedder::BagOfWords(b) => b.tag.clone(),
            ScriptedEmbedder::Transcript { dims, .. } => format!("transcript:{dims}"),
        }
    }

    fn deterministic(&self) -> bool {
        true
    }
}
