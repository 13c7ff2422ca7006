use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cache taxonomy used when no other list is configured.
pub const DEFAULT_TAXONOMY: &[&str] = &[
    "values_and_beliefs",
    "interests",
    "political_leaning",
    "communication_style",
    "domain_expertise",
    "sentiment_disposition",
    "demographics",
];

pub fn default_taxonomy() -> Vec<String> {
    DEFAULT_TAXONOMY.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Post,
    Response,
    Profile,
    SurveyAnswer,
}

/// One raw interaction of a user. Field order matches the `history.jsonl` line layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub record_id: String,
    pub user_id: String,
    pub timestamp: i64,
    pub kind: RecordKind,
    pub text: String,
    #[serde(default)]
    pub meta: Option<BTreeMap<String, String>>,
}

impl UserRecord {
    pub fn new(
        record_id: impl Into<String>,
        user_id: impl Into<String>,
        timestamp: i64,
        kind: RecordKind,
        text: impl Into<String>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            user_id: user_id.into(),
            timestamp,
            kind,
            text: text.into(),
            meta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.record_id.is_empty() {
            return Err(Error::MalformedRecord("empty record_id".into()));
        }
        if self.user_id.is_empty() {
            return Err(Error::MalformedRecord(format!(
                "record `{}` has an empty user_id",
                self.record_id
            )));
        }
        if self.text.trim().is_empty() {
            return Err(Error::MalformedRecord(format!(
                "record `{}` has empty text",
                self.record_id
            )));
        }
        if self.timestamp < 0 {
            return Err(Error::MalformedRecord(format!(
                "record `{}` has a negative timestamp",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Database layers, ordered from raw to most abstract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    History,
    DistilledPersona,
    InducedPersona,
    Cache,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::History,
        Layer::DistilledPersona,
        Layer::InducedPersona,
        Layer::Cache,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::History => "History",
            Layer::DistilledPersona => "DistilledPersona",
            Layer::InducedPersona => "InducedPersona",
            Layer::Cache => "Cache",
        }
    }

    pub fn parse(s: &str) -> Option<Layer> {
        match s {
            "History" | "history" | "H" => Some(Layer::History),
            "DistilledPersona" | "distilled_persona" | "DP" | "dp" => Some(Layer::DistilledPersona),
            "InducedPersona" | "induced_persona" | "IP" | "ip" => Some(Layer::InducedPersona),
            "Cache" | "cache" => Some(Layer::Cache),
            _ => None,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub entry_id: String,
    pub layer: Layer,
    /// Taxonomy key; only set on cache entries.
    #[serde(default)]
    pub key: String,
    pub text: String,
    #[serde(default)]
    pub provenance: Vec<String>,
    pub created_at: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaMeta {
    /// Name of the prompt template set that produced the refined layers.
    #[serde(default)]
    pub prompt_set: String,
    /// Set when the cache was built straight from History because DP and IP were empty.
    #[serde(default)]
    pub cache_degraded: bool,
}

/// One user's four-layer persona database.
///
/// The History layer is backed by `history`; the refined layers live in `layers`
/// keyed by layer (History is never a key there).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaDatabase {
    pub user_id: String,
    pub taxonomy: Vec<String>,
    pub meta: PersonaMeta,
    pub history: Vec<UserRecord>,
    pub layers: BTreeMap<Layer, Vec<PersonaEntry>>,
}

/// A borrowed view of any retrievable item in a database.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryRef<'a> {
    pub id: &'a str,
    pub layer: Layer,
    pub key: &'a str,
    pub text: &'a str,
    pub timestamp: i64,
}

impl PersonaDatabase {
    pub fn new(user_id: impl Into<String>, taxonomy: Vec<String>) -> Self {
        Self {
            user_id: user_id.into(),
            taxonomy,
            meta: PersonaMeta::default(),
            history: Vec::new(),
            layers: BTreeMap::new(),
        }
    }

    pub fn layer(&self, layer: Layer) -> &[PersonaEntry] {
        self.layers.get(&layer).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn set_layer(&mut self, layer: Layer, entries: Vec<PersonaEntry>) {
        debug_assert!(layer != Layer::History);
        if entries.is_empty() {
            self.layers.remove(&layer);
        } else {
            self.layers.insert(layer, entries);
        }
    }

    /// Entries of `layer` in stored order; History yields its records.
    pub fn entries(&self, layer: Layer) -> Vec<EntryRef<'_>> {
        match layer {
            Layer::History => self
                .history
                .iter()
                .map(|r| EntryRef {
                    id: &r.record_id,
                    layer,
                    key: "",
                    text: &r.text,
                    timestamp: r.timestamp,
                })
                .collect(),
            _ => self
                .layer(layer)
                .iter()
                .map(|e| EntryRef {
                    id: &e.entry_id,
                    layer,
                    key: &e.key,
                    text: &e.text,
                    timestamp: e.created_at,
                })
                .collect(),
        }
    }

    pub fn history_ids(&self) -> BTreeSet<&str> {
        self.history.iter().map(|r| r.record_id.as_str()).collect()
    }

    pub fn latest_timestamp(&self) -> i64 {
        self.history.iter().map(|r| r.timestamp).max().unwrap_or(0)
    }

    /// Cache layer as sorted `key: value` lines.
    pub fn cache_text(&self) -> String {
        let mut lines: Vec<String> = self
            .layer(Layer::Cache)
            .iter()
            .map(|e| format!("{}: {}", e.key, e.text))
            .collect();
        lines.sort();
        lines.join("\n")
    }

    /// Inserts a record keeping History ordered by timestamp; equal timestamps keep
    /// ingestion order.
    pub(crate) fn insert_record(&mut self, record: UserRecord) {
        let pos = self
            .history
            .partition_point(|r| r.timestamp <= record.timestamp);
        self.history.insert(pos, record);
    }

    /// Checks every structural invariant, including that provenance only points to
    /// strictly lower layers (which makes the provenance graph acyclic).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDatabase(format!("{}: {msg}", self.user_id)));

        let mut history_ids = HashSet::new();
        for r in &self.history {
            r.validate()?;
            if r.user_id != self.user_id {
                return bad(format!("record `{}` belongs to `{}`", r.record_id, r.user_id));
            }
            if !history_ids.insert(r.record_id.as_str()) {
                return bad(format!("duplicate record `{}`", r.record_id));
            }
        }
        if self.history.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
            return bad("history out of timestamp order".into());
        }

        let mut seen_ids: HashSet<&str> = HashSet::new();
        // ids visible to the layer currently being checked
        let mut lower: HashSet<&str> = history_ids.clone();
        for layer in [Layer::DistilledPersona, Layer::InducedPersona, Layer::Cache] {
            let mut keys = HashSet::new();
            for e in self.layer(layer) {
                if e.layer != layer {
                    return bad(format!("entry `{}` filed under {layer}", e.entry_id));
                }
                if !seen_ids.insert(e.entry_id.as_str()) {
                    return bad(format!("duplicate entry id `{}`", e.entry_id));
                }
                if e.text.is_empty() {
                    return bad(format!("entry `{}` has empty text", e.entry_id));
                }
                match layer {
                    Layer::Cache => {
                        if !self.taxonomy.contains(&e.key) {
                            return bad(format!("cache key `{}` not in taxonomy", e.key));
                        }
                        if !keys.insert(e.key.as_str()) {
                            return bad(format!("cache key `{}` repeated", e.key));
                        }
                    }
                    _ => {
                        if !e.key.is_empty() && layer != Layer::DistilledPersona {
                            return bad(format!("entry `{}` carries a key", e.entry_id));
                        }
                        if e.provenance.is_empty() {
                            return bad(format!("entry `{}` has no provenance", e.entry_id));
                        }
                    }
                }
                for p in &e.provenance {
                    if !lower.contains(p.as_str()) {
                        return bad(format!(
                            "entry `{}` cites `{p}` which is not in a lower layer",
                            e.entry_id
                        ));
                    }
                }
            }
            lower.extend(self.layer(layer).iter().map(|e| e.entry_id.as_str()));
        }
        if self.layers.contains_key(&Layer::History) {
            return bad("History entries must live in `history`".into());
        }
        Ok(())
    }
}

/// A finite real vector tagged with the embedder that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub dims: usize,
    pub values: Vec<f64>,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_tag: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidRequest("embedding must have dims > 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRequest(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self {
            dims: values.len(),
            values,
            model_tag: model_tag.into(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }
}
