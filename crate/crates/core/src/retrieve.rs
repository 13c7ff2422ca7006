//! Query-time retrieval: scores the user's own pool and the collaborative pool
//! against a query and mixes them under capacity `r` and composition ratio `x`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::collab::{cosine, Collab};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{EmbedRequest, Gateway, RETRIEVAL_PROMPT};
use crate::store::{Layer, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemOrder {
    /// Self block, then collaborative block.
    #[default]
    Grouped,
    /// One list by descending score.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionConfig {
    /// Retrieval capacity.
    pub r: usize,
    /// Share of `r` given to collaborative items.
    pub x: f64,
    pub pool_layers: Vec<Layer>,
    pub backfill: bool,
    pub order: ItemOrder,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            r: 40,
            x: 0.25,
            pool_layers: vec![Layer::DistilledPersona, Layer::InducedPersona],
            backfill: true,
            order: ItemOrder::Grouped,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::ConfigError("composition.r must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.x) {
            return Err(Error::ConfigError(format!(
                "composition.x must be in [0, 1], got {}",
                self.x
            )));
        }
        if self.pool_layers.is_empty() {
            return Err(Error::ConfigError("composition.pool_layers must not be empty".into()));
        }
        Ok(())
    }

    /// `(collaborative, self)` quotas before backfill.
    pub fn quotas(&self) -> (usize, usize) {
        let c = collab_quota(self.r, self.x);
        (c, self.r - c)
    }
}

/// `⌈x·r⌉`, reading products within rounding error of an integer as that integer.
pub fn collab_quota(r: usize, x: f64) -> usize {
    let q = x * r as f64;
    let nearest = q.round();
    let c = if (q - nearest).abs() <= 1e-9 * (r.max(1) as f64) {
        nearest
    } else {
        q.ceil()
    };
    (c.max(0.0) as usize).min(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[serde(rename = "self")]
    Own,
    Collaborative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub id: String,
    pub text: String,
    pub source: Source,
    pub source_user: String,
    pub layer: Layer,
    /// Query cosine; `None` when the item has no embeddable content (ranked last).
    pub score: Option<f64>,
    /// Timestamp of the underlying record or entry.
    #[serde(default)]
    pub timestamp: i64,
}

impl RetrievalItem {
    fn rank_key(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub query_digest: String,
    pub items: Vec<RetrievalItem>,
    pub n_self: usize,
    pub n_collab: usize,
}

impl RetrievalSet {
    pub fn empty(query: &str) -> Self {
        Self {
            query_digest: sha256_hex(query.as_bytes()),
            items: Vec::new(),
            n_self: 0,
            n_collab: 0,
        }
    }

    pub fn of(&self, source: Source) -> impl Iterator<Item = &RetrievalItem> {
        self.items.iter().filter(move |i| i.source == source)
    }
}

/// Stable sort by descending score.
pub fn rank(items: &mut [RetrievalItem]) {
    items.sort_by(|a, b| b.rank_key().total_cmp(&a.rank_key()));
}

/// Mixes two ranked pools. Takes `⌈x·r⌉` collaborative and `r − ⌈x·r⌉` own items,
/// with backfill from the other pool when one runs short.
pub fn compose(
    self_ranked: Vec<RetrievalItem>,
    collab_ranked: Vec<RetrievalItem>,
    cfg: &CompositionConfig,
) -> (Vec<RetrievalItem>, usize, usize) {
    let (qc, qs) = cfg.quotas();
    let (supply_s, supply_c) = (self_ranked.len(), collab_ranked.len());
    let mut n_collab = qc.min(supply_c);
    let mut n_self = qs.min(supply_s);
    if cfg.backfill {
        n_self = (cfg.r - n_collab).min(supply_s);
        n_collab = (cfg.r - n_self).min(supply_c);
    }
    let mut items: Vec<RetrievalItem> = self_ranked.into_iter().take(n_self).collect();
    items.extend(collab_ranked.into_iter().take(n_collab));
    if cfg.order == ItemOrder::Interleaved {
        rank(&mut items);
    }
    (items, n_self, n_collab)
}

/// Scores candidates against queries with the retrieval embedding prompt.
pub struct Retriever<'a> {
    gateway: &'a Gateway,
    max_in_flight: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self {
            gateway,
            max_in_flight: 1,
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Cosine between the query and each text. Texts with no embeddable content
    /// score `None`.
    pub fn score_pool(&self, query: &str, texts: &[&str]) -> Result<Vec<Option<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let journal = self.gateway.journal();
        let q = self.gateway.embed(&EmbedRequest::new(RETRIEVAL_PROMPT, query))?;
        if q.norm() == 0.0 {
            journal.warn("retrieve/query", "query embedding has zero norm; pool left unscored");
            return Ok(vec![None; texts.len()]);
        }
        let reqs: Vec<EmbedRequest> = texts
            .iter()
            .filter(|t| !t.trim().is_empty())
            .map(|t| EmbedRequest::new(RETRIEVAL_PROMPT, *t))
            .collect();
        let mut embedded = self
            .gateway
            .embed_batch(&reqs, self.max_in_flight)?
            .into_iter();
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            if t.trim().is_empty() {
                out.push(None);
                continue;
            }
            let v = embedded.next().expect("one result per request")?;
            match cosine(&q.values, &v.values) {
                Ok(s) => out.push(Some(s)),
                Err(Error::ZeroNormVector) => {
                    journal.warn("retrieve/candidate", format!("zero-norm candidate ranked last: {t}"));
                    out.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Scores and ranks `items` in place.
    pub fn score_items(&self, query: &str, items: &mut [RetrievalItem]) -> Result<()> {
        let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
        let scores = self.score_pool(query, &texts)?;
        for (item, s) in items.iter_mut().zip(scores) {
            item.score = s;
        }
        rank(items);
        Ok(())
    }

    /// Retrieves for `user`: own entries from `pool_layers`, collaborative entries
    /// from the join filtered to the same layers. The join is skipped when `x = 0`.
    pub fn retrieve(
        &self,
        store: &Store,
        collab: Option<&Collab<'_>>,
        user: &str,
        query: &str,
        cfg: &CompositionConfig,
    ) -> Result<RetrievalSet> {
        cfg.validate()?;
        let db = store.load_database(user)?;
        let mut own: Vec<RetrievalItem> = Vec::new();
        for &layer in &cfg.pool_layers {
            own.extend(db.entries(layer).into_iter().map(|e| RetrievalItem {
                id: e.id.to_string(),
                text: e.text.to_string(),
                source: Source::Own,
                source_user: user.to_string(),
                layer,
                score: None,
                timestamp: e.timestamp,
            }));
        }
        let mut others: Vec<RetrievalItem> = Vec::new();
        if cfg.x > 0.0 {
            let collab = collab.ok_or_else(|| {
                Error::ConfigError("composition.x > 0 needs a collaborative join".into())
            })?;
            let joined = collab.join(user)?;
            let own_texts: HashSet<&str> = own.iter().map(|i| i.text.as_str()).collect();
            let mut seen: HashSet<&str> = HashSet::new();
            for e in &joined.entries {
                if !cfg.pool_layers.contains(&e.layer)
                    || own_texts.contains(e.text.as_str())
                    || !seen.insert(e.text.as_str())
                {
                    continue;
                }
                others.push(RetrievalItem {
                    id: e.id.clone(),
                    text: e.text.clone(),
                    source: Source::Collaborative,
                    source_user: e.source_user.clone(),
                    layer: e.layer,
                    score: None,
                    timestamp: 0,
                });
            }
        }
        self.score_items(query, &mut own)?;
        self.score_items(query, &mut others)?;
        let (items, n_self, n_collab) = compose(own, others, cfg);
        Ok(RetrievalSet {
            query_digest: sha256_hex(query.as_bytes()),
            items,
            n_self,
            n_collab,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::collab::JoinConfig;
    use crate::gateway::{AnalyzerRequest, BagOfWords, ScriptedAnalyzer};
    use crate::store::{PersonaEntry, RecordKind, UserRecord};

    fn item(source: Source, i: usize) -> RetrievalItem {
        RetrievalItem {
            id: format!("{source:?}{i}"),
            text: format!("{source:?} {i}"),
            source,
            source_user: "u".into(),
            layer: Layer::DistilledPersona,
            score: Some(1.0 - i as f64 / 1000.0),
            timestamp: 0,
        }
    }

    fn pools(s: usize, c: usize) -> (Vec<RetrievalItem>, Vec<RetrievalItem>) {
        (
            (0..s).map(|i| item(Source::Own, i)).collect(),
            (0..c).map(|i| item(Source::Collaborative, i)).collect(),
        )
    }

    fn cfg(r: usize, x: f64, backfill: bool) -> CompositionConfig {
        CompositionConfig {
            r,
            x,
            backfill,
            ..CompositionConfig::default()
        }
    }

    #[test]
    fn composition_examples() {
        let (s, c) = pools(100, 100);
        let (items, ns, nc) = compose(s, c, &cfg(40, 0.25, true));
        assert_eq!((nc, ns), (10, 30));
        assert!(items[..30].iter().all(|i| i.source == Source::Own));

        let (s, c) = pools(100, 100);
        let (_, ns, nc) = compose(s, c, &cfg(7, 0.5, true));
        assert_eq!((nc, ns), (4, 3));

        let (s, c) = pools(100, 2);
        let (_, ns, nc) = compose(s, c, &cfg(10, 0.5, true));
        assert_eq!((nc, ns), (2, 8));
        let (s, c) = pools(100, 2);
        let (_, ns, nc) = compose(s, c, &cfg(10, 0.5, false));
        assert_eq!((nc, ns), (2, 5));
    }

    #[test]
    fn quota_is_exact_on_the_twentieths() {
        for r in 1..=100usize {
            for k in 0..=20usize {
                let exact = (k * r).div_ceil(20);
                assert_eq!(collab_quota(r, k as f64 * 0.05), exact, "r={r} k={k}");
            }
        }
    }

    #[test]
    fn interleaved_order() {
        let mut s = vec![item(Source::Own, 5)];
        s[0].score = Some(0.1);
        let c = vec![item(Source::Collaborative, 0)];
        let mut conf = cfg(2, 0.5, true);
        conf.order = ItemOrder::Interleaved;
        let (items, _, _) = compose(s, c, &conf);
        assert_eq!(items[0].source, Source::Collaborative);
    }

    proptest! {
        #[test]
        fn capacity_and_quota_laws(r in 1usize..=100, k in 0usize..=10, s in 0usize..120, c in 0usize..120, backfill: bool) {
            let x = k as f64 / 10.0;
            let (sp, cp) = pools(s, c);
            let (items, ns, nc) = compose(sp, cp, &cfg(r, x, backfill));
            prop_assert_eq!(items.len(), ns + nc);
            prop_assert!(items.len() <= r);
            let q = (k * r).div_ceil(10);
            if backfill {
                prop_assert_eq!(items.len(), r.min(s + c));
            } else {
                prop_assert_eq!(nc, q.min(c));
                prop_assert_eq!(ns, (r - q).min(s));
            }
        }

        #[test]
        fn growing_r_keeps_earlier_picks(r in 1usize..60, k in 0usize..=10, s in 0usize..80, c in 0usize..80) {
            let x = k as f64 / 10.0;
            let pick = |r| {
                let (sp, cp) = pools(s, c);
                compose(sp, cp, &cfg(r, x, false)).0
            };
            let small = pick(r);
            let big = pick(r + 1);
            for it in small {
                prop_assert!(big.contains(&it));
            }
        }
    }

    fn gateway() -> Gateway {
        Gateway::scripted(
            ScriptedAnalyzer::responder_only(Arc::new(|_: &AnalyzerRequest| None)),
            BagOfWords::new(["solar", "energy", "project", "cooking", "recipes", "green", "wind"]).unwrap(),
        )
    }

    #[test]
    fn scoring() {
        let gw = gateway();
        let r = Retriever::new(&gw);
        let s = r
            .score_pool("solar energy", &["solar energy project", "cooking recipes"])
            .unwrap();
        assert!(s[0].unwrap() > s[1].unwrap());
        let s = r.score_pool("solar energy", &["solar energy", "unrelated words"]).unwrap();
        assert!((s[0].unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(s[1], None);
        assert_eq!(r.score_pool("solar", &["solar"]).unwrap().len(), 1);
    }

    fn entry(user: &str, i: usize, text: &str) -> PersonaEntry {
        PersonaEntry {
            entry_id: format!("dp:{i}"),
            layer: Layer::DistilledPersona,
            key: String::new(),
            text: text.into(),
            provenance: vec![format!("{user}-r0")],
            created_at: 0,
        }
    }

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with_taxonomy(dir.path(), vec!["interests".into()]).unwrap();
        let users = [
            ("me", vec!["green living"], "green"),
            ("mate", vec!["solar energy project", "green living", "wind"], "green"),
            ("other", vec!["cooking recipes"], "cooking"),
        ];
        store
            .ingest_records(
                users
                    .iter()
                    .map(|(u, _, _)| UserRecord::new(format!("{u}-r0"), *u, 0, RecordKind::Post, "x"))
                    .collect(),
            )
            .unwrap();
        for (u, dp, cache) in users {
            let mut db = store.load_database(u).unwrap();
            db.set_layer(
                Layer::DistilledPersona,
                dp.iter().enumerate().map(|(i, t)| entry(u, i, t)).collect(),
            );
            db.set_layer(
                Layer::Cache,
                vec![PersonaEntry {
                    entry_id: "cache:interests".into(),
                    layer: Layer::Cache,
                    key: "interests".into(),
                    text: cache.into(),
                    provenance: vec!["dp:0".into()],
                    created_at: 0,
                }],
            );
            store.save_database(&db).unwrap();
        }
        (dir, store)
    }

    #[test]
    fn retrieve_end_to_end() {
        let (_dir, store) = store();
        let gw = gateway();
        let collab = Collab::new(&gw, &store, JoinConfig { k: 1, ..JoinConfig::default() }).unwrap();
        let r = Retriever::new(&gw);

        let solo = r
            .retrieve(&store, None, "me", "solar energy", &cfg(5, 0.0, true))
            .unwrap();
        assert!(solo.items.iter().all(|i| i.source == Source::Own));

        let set = r
            .retrieve(&store, Some(&collab), "me", "solar energy", &cfg(3, 0.25, true))
            .unwrap();
        assert_eq!(set.n_self, 1);
        // the duplicate "green living" keeps the self copy only
        assert_eq!(set.n_collab, 2);
        let collab_items: Vec<_> = set.of(Source::Collaborative).collect();
        assert_eq!(collab_items[0].text, "solar energy project");
        assert!(collab_items.iter().all(|i| i.source_user == "mate"));

        let all_collab = r
            .retrieve(&store, Some(&collab), "me", "solar", &cfg(2, 1.0, false))
            .unwrap();
        assert_eq!(all_collab.n_self, 0);
        assert_eq!(all_collab.n_collab, 2);

        assert!(matches!(
            r.retrieve(&store, None, "ghost", "q", &cfg(2, 0.0, true)),
            Err(Error::UnknownUser(_))
        ));
        let again = r
            .retrieve(&store, Some(&collab), "me", "solar energy", &cfg(3, 0.25, true))
            .unwrap();
        assert_eq!(set, again);
    }
}
