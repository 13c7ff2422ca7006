//! Collaborative refinement: cache embeddings, cosine similarity, top-K selection
//! and the JOIN of the most similar users' databases.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::gateway::{EmbedRequest, Gateway, JOIN_PROMPT};
use crate::parallel::map_bounded;
use crate::store::{EmbeddingVector, Layer, PersonaDatabase, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JoinConfig {
    pub k: usize,
    pub exclude_self: bool,
    /// Explicit candidates; `None` means every user with a non-degraded cache.
    pub candidate_set: Option<Vec<String>>,
    /// Layers concatenated into the collaborative database, in this order.
    pub layers: Vec<Layer>,
    /// Candidates scoring below this are never selected.
    pub min_similarity: Option<f64>,
}

impl Default for JoinConfig {
    fn default() -> Self {
        Self {
            k: 5,
            exclude_self: true,
            candidate_set: None,
            layers: vec![Layer::DistilledPersona, Layer::InducedPersona, Layer::History],
            min_similarity: None,
        }
    }
}

impl JoinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::ConfigError("join.k must be at least 1".into()));
        }
        if self.layers.contains(&Layer::Cache) {
            return Err(Error::ConfigError("join.layers may not include Cache".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collaborator {
    pub user_id: String,
    pub psi: f64,
}

/// One entry of a collaborator's database, tagged with its source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollabEntry {
    pub source_user: String,
    pub layer: Layer,
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollaborativeDatabase {
    pub owner: String,
    pub collaborators: Vec<Collaborator>,
    pub entries: Vec<CollabEntry>,
}

impl CollaborativeDatabase {
    pub fn is_collaborator(&self, user_id: &str) -> bool {
        self.collaborators.iter().any(|c| c.user_id == user_id)
    }
}

/// Cosine similarity.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds the sorted cache text with the join prompt, L2-normalized.
pub fn embed_cache(gateway: &Gateway, db: &PersonaDatabase) -> Result<EmbeddingVector> {
    let text = db.cache_text();
    if text.is_empty() {
        return Err(Error::EmptyCache(db.user_id.clone()));
    }
    Ok(gateway
        .embed(&EmbedRequest::new(JOIN_PROMPT, text))?
        .normalized())
}

/// Ranks `candidates` against `owner` by ψ, descending, ties by ascending id.
pub fn rank_collaborators(
    owner: (&str, &EmbeddingVector),
    candidates: &[(String, EmbeddingVector)],
    cfg: &JoinConfig,
) -> Result<Vec<Collaborator>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, v) in candidates {
        if cfg.exclude_self && id == owner.0 {
            continue;
        }
        let psi = similarity(owner.1, v)?;
        if cfg.min_similarity.is_some_and(|m| psi < m) {
            continue;
        }
        scored.push(Collaborator {
            user_id: id.clone(),
            psi,
        });
    }
    if scored.is_empty() {
        return Err(Error::NoCandidates(owner.0.to_string()));
    }
    scored.sort_by(|a, b| b.psi.total_cmp(&a.psi).then_with(|| a.user_id.cmp(&b.user_id)));
    scored.truncate(cfg.k);
    Ok(scored)
}

/// Concatenates the collaborators' selected layers in rank order.
pub fn concat_entries(collaborators: &[&PersonaDatabase], layers: &[Layer]) -> Vec<CollabEntry> {
    let mut out = Vec::new();
    for db in collaborators {
        for &layer in layers {
            out.extend(db.entries(layer).into_iter().map(|e| CollabEntry {
                source_user: db.user_id.clone(),
                layer,
                id: e.id.to_string(),
                text: e.text.to_string(),
            }));
        }
    }
    out
}

type Stamp = Option<(u64, SystemTime)>;

/// A memoized join and the persona stamps it was built from.
type CachedJoin = (Vec<(String, Stamp)>, Arc<CollaborativeDatabase>);

#[derive(Clone)]
struct CachedVector {
    stamp: Stamp,
    /// `None` when the user cannot be a candidate.
    vector: Option<EmbeddingVector>,
    degraded: bool,
}

/// Computes and memoizes cache vectors and joins over a store.
pub struct Collab<'a> {
    gateway: &'a Gateway,
    store: &'a Store,
    cfg: JoinConfig,
    max_parallel: usize,
    vectors: Mutex<HashMap<String, CachedVector>>,
    joins: Mutex<HashMap<String, CachedJoin>>,
}

impl<'a> Collab<'a> {
    pub fn new(gateway: &'a Gateway, store: &'a Store, cfg: JoinConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            gateway,
            store,
            cfg,
            max_parallel: 1,
            vectors: Mutex::new(HashMap::new()),
            joins: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn config(&self) -> &JoinConfig {
        &self.cfg
    }

    fn cached(&self, user_id: &str) -> Result<CachedVector> {
        let stamp = self.store.persona_stamp(user_id);
        if let Some(c) = self.vectors.lock().unwrap().get(user_id) {
            if c.stamp == stamp {
                return Ok(c.clone());
            }
        }
        let db = self.store.load_database(user_id)?;
        let vector = match embed_cache(self.gateway, &db) {
            Ok(v) if v.norm() > 0.0 => Some(v),
            Ok(_) => {
                self.gateway.journal().warn(
                    format!("collab/{user_id}"),
                    "cache embedding has zero norm; excluded from candidacy",
                );
                None
            }
            Err(Error::EmptyCache(_)) => None,
            Err(e) => return Err(e),
        };
        let c = CachedVector {
            stamp,
            vector,
            degraded: db.meta.cache_degraded,
        };
        self.vectors
            .lock()
            .unwrap()
            .insert(user_id.to_string(), c.clone());
        Ok(c)
    }

    /// The user's cache vector; `None` when it is empty or has zero norm.
    pub fn cache_vector(&self, user_id: &str) -> Result<Option<EmbeddingVector>> {
        Ok(self.cached(user_id)?.vector)
    }

    fn candidate_ids(&self) -> Result<(Vec<String>, bool)> {
        match &self.cfg.candidate_set {
            Some(ids) => Ok((ids.clone(), true)),
            None => Ok((self.store.user_ids()?, false)),
        }
    }

    /// Embeds every candidate's cache, in parallel, ahead of the first join.
    pub fn warm(&self) -> Result<()> {
        let (ids, _) = self.candidate_ids()?;
        for r in map_bounded(&ids, self.max_parallel, |u| self.cached(u)) {
            r?;
        }
        Ok(())
    }

    fn candidates(&self, owner: &str) -> Result<Vec<(String, EmbeddingVector)>> {
        let (ids, explicit) = self.candidate_ids()?;
        let cached = map_bounded(&ids, self.max_parallel, |u| self.cached(u));
        let mut out = Vec::new();
        for (id, c) in ids.into_iter().zip(cached) {
            if self.cfg.exclude_self && id == owner {
                continue;
            }
            let c = c?;
            if c.degraded && !explicit {
                continue;
            }
            if let Some(v) = c.vector {
                out.push((id, v));
            }
        }
        Ok(out)
    }

    pub fn top_k(&self, owner: &str) -> Result<Vec<Collaborator>> {
        if !self.store.user_exists(owner) {
            return Err(Error::UnknownUser(owner.to_string()));
        }
        let own = self
            .cached(owner)?
            .vector
            .ok_or_else(|| Error::EmptyCache(owner.to_string()))?;
        let candidates = self.candidates(owner)?;
        rank_collaborators((owner, &own), &candidates, &self.cfg)
    }

    /// The owner's collaborative database. Memoized until any candidate's
    /// persona.json changes.
    pub fn join(&self, owner: &str) -> Result<Arc<CollaborativeDatabase>> {
        let stamps = self.stamps()?;
        if let Some((s, j)) = self.joins.lock().unwrap().get(owner) {
            if *s == stamps {
                return Ok(j.clone());
            }
        }
        let collaborators = self.top_k(owner)?;
        let mut dbs = Vec::with_capacity(collaborators.len());
        for c in &collaborators {
            dbs.push(self.store.load_database(&c.user_id)?);
        }
        let refs: Vec<&PersonaDatabase> = dbs.iter().collect();
        let joined = Arc::new(CollaborativeDatabase {
            owner: owner.to_string(),
            entries: concat_entries(&refs, &self.cfg.layers),
            collaborators,
        });
        self.joins
            .lock()
            .unwrap()
            .insert(owner.to_string(), (stamps, joined.clone()));
        Ok(joined)
    }

    fn stamps(&self) -> Result<Vec<(String, Stamp)>> {
        let (ids, _) = self.candidate_ids()?;
        Ok(ids
            .into_iter()
            .map(|u| {
                let s = self.store.persona_stamp(&u);
                (u, s)
            })
            .collect())
    }
}

/// Summary written per user by the `join` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabSummary {
    pub owner: String,
    pub config_digest: String,
    pub collaborators: Vec<Collaborator>,
    pub entry_count: usize,
}

impl CollabSummary {
    pub fn new(join: &CollaborativeDatabase, cfg: &JoinConfig) -> Self {
        Self {
            owner: join.owner.clone(),
            config_digest: cfg.digest(),
            collaborators: join.collaborators.clone(),
            entry_count: join.entries.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::store::{PersonaEntry, RecordKind, UserRecord};

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "t").unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 4.0, 4.0])).unwrap() - 1.0).abs() < 1e-15);
        // dot = 1, both norms √2
        assert!((similarity(&v(&[1.0, 1.0, 0.0]), &v(&[1.0, 0.0, 1.0])).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::ZeroNormVector)
        ));
        assert!(matches!(
            similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        // unit vectors at the required angles to a fixed owner
        let owner = v(&[1.0, 0.0]);
        let at = |psi: f64| v(&[psi, (1.0 - psi * psi).sqrt()]);
        let cands = vec![
            ("u4".to_string(), at(0.1)),
            ("u2".to_string(), at(0.9)),
            ("u3".to_string(), at(0.5)),
            ("u1".to_string(), at(0.9)),
        ];
        let cfg = JoinConfig {
            k: 2,
            ..JoinConfig::default()
        };
        let ids: Vec<_> = rank_collaborators(("me", &owner), &cands, &cfg)
            .unwrap()
            .into_iter()
            .map(|c| c.user_id)
            .collect();
        assert_eq!(ids, ["u1", "u2"]);

        let all = JoinConfig {
            k: 10,
            ..JoinConfig::default()
        };
        assert_eq!(rank_collaborators(("me", &owner), &cands, &all).unwrap().len(), 4);

        let mut with_self = cands.clone();
        with_self.push(("me".into(), owner.clone()));
        let r = rank_collaborators(("me", &owner), &with_self, &all).unwrap();
        assert!(r.iter().all(|c| c.user_id != "me"));

        assert!(matches!(
            rank_collaborators(("me", &owner), &[], &all),
            Err(Error::NoCandidates(_))
        ));
        let strict = JoinConfig {
            min_similarity: Some(0.6),
            ..all
        };
        assert_eq!(rank_collaborators(("me", &owner), &cands, &strict).unwrap().len(), 2);
    }

    fn db_with(user: &str, dp: usize, hist: usize) -> PersonaDatabase {
        let mut db = PersonaDatabase::new(user, vec!["interests".into()]);
        for i in 0..hist.max(1) {
            db.insert_record(UserRecord::new(format!("{user}-r{i}"), user, i as i64, RecordKind::Post, "t"));
        }
        if hist == 0 {
            db.history.clear();
        }
        let entries = (0..dp)
            .map(|i| PersonaEntry {
                entry_id: format!("dp:{i}"),
                layer: Layer::DistilledPersona,
                key: String::new(),
                text: format!("{user} fact {i}"),
                provenance: vec![format!("{user}-r0")],
                created_at: 0,
            })
            .collect();
        db.set_layer(Layer::DistilledPersona, entries);
        db
    }

    #[test]
    fn concatenation_order_and_size() {
        let a = db_with("a", 3, 1);
        let b = db_with("b", 2, 1);
        let e = concat_entries(&[&a, &b], &[Layer::DistilledPersona]);
        assert_eq!(e.len(), 5);
        assert!(e[..3].iter().all(|x| x.source_user == "a"));
        let a = db_with("a", 0, 4);
        let b = db_with("b", 0, 1);
        let e = concat_entries(&[&a, &b], &[Layer::History]);
        assert_eq!(e.len(), 5);
        assert_eq!(e[4].source_user, "b");
    }

    fn store_with_caches(caches: &[(&str, &str)]) -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_with_taxonomy(dir.path(), vec!["interests".into()]).unwrap();
        let recs = caches
            .iter()
            .map(|(u, _)| UserRecord::new(format!("{u}-r0"), *u, 0, RecordKind::Post, "t"))
            .collect();
        store.ingest_records(recs).unwrap();
        for (u, text) in caches {
            let mut db = store.load_database(u).unwrap();
            db.set_layer(
                Layer::Cache,
                vec![PersonaEntry {
                    entry_id: "cache:interests".into(),
                    layer: Layer::Cache,
                    key: "interests".into(),
                    text: text.to_string(),
                    provenance: vec![format!("{u}-r0")],
                    created_at: 0,
                }],
            );
            store.save_database(&db).unwrap();
        }
        (dir, store)
    }

    fn bow_gateway() -> Gateway {
        use crate::gateway::{BagOfWords, ScriptedAnalyzer};
        Gateway::scripted(
            ScriptedAnalyzer::responder_only(Arc::new(|_: &crate::gateway::AnalyzerRequest| None)),
            BagOfWords::new(["solar", "wind", "bread", "cake", "x"]).unwrap(),
        )
    }

    #[test]
    fn join_over_store_and_invalidation() {
        let (_dir, store) = store_with_caches(&[
            ("a", "solar wind"),
            ("b", "solar wind"),
            ("c", "bread cake"),
            ("z", "nothing known"),
        ]);
        let gw = bow_gateway();
        let collab = Collab::new(
            &gw,
            &store,
            JoinConfig {
                k: 2,
                layers: vec![Layer::History],
                ..JoinConfig::default()
            },
        )
        .unwrap();
        // identical caches, identical vectors
        assert_eq!(collab.cache_vector("a").unwrap(), collab.cache_vector("b").unwrap());
        // zero-norm cache is excluded with a warning
        assert_eq!(collab.cache_vector("z").unwrap(), None);
        assert!(gw.journal().warnings().iter().any(|(c, _)| c == "collab/z"));

        let j = collab.join("a").unwrap();
        let ids: Vec<_> = j.collaborators.iter().map(|c| c.user_id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(j.collaborators[1].psi, 0.0);
        assert_eq!(j.entries.len(), 2);
        assert!(j.entries.iter().all(|e| e.source_user != "a"));
        assert!(Arc::ptr_eq(&j, &collab.join("a").unwrap()));

        // rewriting a collaborator invalidates the memo
        let mut c = store.load_database("c").unwrap();
        let mut cache = c.layer(Layer::Cache).to_vec();
        cache[0].text = "solar solar wind wind wind".into();
        c.set_layer(Layer::Cache, cache);
        std::thread::sleep(std::time::Duration::from_millis(20));
        store.save_database(&c).unwrap();
        let j2 = collab.join("a").unwrap();
        assert!(!Arc::ptr_eq(&j, &j2));
        assert!(j2.collaborators[1].psi > 0.0);

        assert!(matches!(collab.join("z"), Err(Error::EmptyCache(_))));
        assert!(matches!(collab.join("ghost"), Err(Error::UnknownUser(_))));

        let empty = Collab::new(
            &gw,
            &store,
            JoinConfig {
                candidate_set: Some(vec![]),
                ..JoinConfig::default()
            },
        )
        .unwrap();
        assert!(matches!(empty.join("a"), Err(Error::NoCandidates(_))));
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn psi_symmetric_and_scale_invariant(a in vec_strategy(8), b in vec_strategy(8), c in 1e-3f64..1e3) {
            let (va, vb) = (v(&a), v(&b));
            let ab = similarity(&va, &vb).unwrap();
            prop_assert!((ab - similarity(&vb, &va).unwrap()).abs() <= 1e-15);
            let scaled = v(&a.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((similarity(&scaled, &vb).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn ranking_invariant_under_candidate_rescaling(
            owner in vec_strategy(4),
            cands in proptest::collection::vec(vec_strategy(4), 1..8),
            which in 0usize..8,
            c in 0.01f64..100.0,
        ) {
            let list: Vec<(String, EmbeddingVector)> =
                cands.iter().enumerate().map(|(i, x)| (format!("u{i}"), v(x))).collect();
            let cfg = JoinConfig { k: 3, ..JoinConfig::default() };
            let base = rank_collaborators(("o", &v(&owner)), &list, &cfg).unwrap();
            let mut rescaled = list.clone();
            let i = which % rescaled.len();
            rescaled[i].1 = v(&cands[i].iter().map(|x| x * c).collect::<Vec<_>>());
            let after = rank_collaborators(("o", &v(&owner)), &rescaled, &cfg).unwrap();
            // ordering can only flip between near-ties
            for (x, y) in base.iter().zip(&after) {
                prop_assert!((x.psi - y.psi).abs() < 1e-9);
            }
        }
    }
}
