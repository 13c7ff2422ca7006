use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOp {
    Analyze,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Call {
        op: CallOp,
        prompt_name: String,
        request_digest: String,
        latency_ms: u64,
        attempts: u32,
        cache_hit: bool,
        /// `ok` or the error kind.
        outcome: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_id: Option<String>,
        /// Analyzer output, kept so a run can be replayed as a transcript.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response: Option<String>,
    },
    Warning {
        context: String,
        message: String,
    },
    Note {
        context: String,
        message: String,
    },
    Prediction {
        task_id: String,
        user_id: String,
        method: String,
        retrieval_digest: String,
        prompt_digest: String,
        raw_output: String,
        parse_status: String,
    },
    Config {
        digest: String,
        resolved: serde_json::Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: JournalEvent,
}

/// Append-only run journal. Every entry is kept in memory and, when a file is
/// attached, written as one JSON line.
#[derive(Debug, Default)]
pub struct Journal {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<JournalEntry>,
    sink: Option<BufWriter<File>>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: Mutex::new(Inner {
                entries: Vec::new(),
                sink: Some(BufWriter::new(file)),
            }),
        })
    }

    pub fn record(&self, event: JournalEvent) {
        let mut inner = self.inner.lock().unwrap();
        let entry = JournalEntry {
            seq: inner.entries.len() as u64,
            event,
        };
        if let Some(sink) = inner.sink.as_mut() {
            // a failed journal write must not take the run down
            let _ = serde_json::to_writer(&mut *sink, &entry)
                .map_err(std::io::Error::from)
                .and_then(|_| sink.write_all(b"\n"))
                .and_then(|_| sink.flush());
        }
        inner.entries.push(entry);
    }

    pub fn warn(&self, context: impl Into<String>, message: impl Into<String>) {
        self.record(JournalEvent::Warning {
            context: context.into(),
            message: message.into(),
        });
    }

    pub fn note(&self, context: impl Into<String>, message: impl Into<String>) {
        self.record(JournalEvent::Note {
            context: context.into(),
            message: message.into(),
        });
    }

    pub fn entries(&self) -> Vec<JournalEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Calls of `op` whose prompt name is `prompt_name`, cache hits excluded.
    pub fn backend_calls(&self, op: CallOp, prompt_name: &str) -> usize {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|e| {
                matches!(&e.event, JournalEvent::Call { op: o, prompt_name: p, cache_hit: false, .. }
                    if *o == op && p == prompt_name)
            })
            .count()
    }

    pub fn warnings(&self) -> Vec<(String, String)> {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter_map(|e| match &e.event {
                JournalEvent::Warning { context, message } => {
                    Some((context.clone(), message.clone()))
                }
                _ => None,
            })
            .collect()
    }

    pub fn read_file(path: &Path) -> Result<Vec<JournalEntry>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_memory_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        let j = Journal::to_file(&path).unwrap();
        j.warn("a", "b");
        j.record(JournalEvent::Call {
            op: CallOp::Analyze,
            prompt_name: "distill".into(),
            request_digest: "d".into(),
            latency_ms: 0,
            attempts: 1,
            cache_hit: false,
            outcome: "ok".into(),
            task_id: None,
            response: Some("x".into()),
        });
        assert_eq!(Journal::read_file(&path).unwrap(), j.entries());
        assert_eq!(j.backend_calls(CallOp::Analyze, "distill"), 1);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"seq\":0,\"event\":\"warning\""));
    }
}
