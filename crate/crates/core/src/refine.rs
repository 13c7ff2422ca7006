//! Hierarchical refinement: History → DistilledPersona → InducedPersona → Cache.
//!
//! Each layer is produced by the analyzer from the layers below it. Analyzer output
//! follows a line grammar:
//!
//! ```text
//! - <fact> (sources: id, id)        distill, merge, induce
//! - [<category>] <description>      cache, optional trailing (sources: ...)
//! ```
//!
//! A malformed answer gets one repair re-prompt before the stage fails.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{AnalyzerRequest, Gateway};
use crate::parallel::map_bounded;
use crate::store::{default_taxonomy, Layer, PersonaDatabase, PersonaEntry, Store};
use crate::template::TemplateSet;

pub const UNKNOWN: &str = "unknown";

const FACT_FORMAT: &str = "- <fact> (sources: <id>, <id>)";
const CACHE_FORMAT: &str = "- [<category>] <short description>";

static FACT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^-\s+(.*\S)\s*\(sources?:\s*([^()]*)\)$").unwrap());
static CACHE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^-\s+\[([^\]]+)\]\s*(.*?)\s*(?:\(sources?:\s*([^()]*)\))?$").unwrap()
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// History records per distill call.
    pub batch_size: usize,
    pub include_dp: bool,
    pub include_ip: bool,
    pub taxonomy: Vec<String>,
    /// Template set name, or a directory of templates.
    pub prompt_set: String,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            include_dp: true,
            include_ip: true,
            taxonomy: default_taxonomy(),
            prompt_set: "default".into(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigError("refine.batch_size must be at least 1".into()));
        }
        if self.taxonomy.is_empty() {
            return Err(Error::ConfigError("refine.taxonomy must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.taxonomy.iter().collect();
        if unique.len() != self.taxonomy.len() {
            return Err(Error::ConfigError("refine.taxonomy has duplicate keys".into()));
        }
        Ok(())
    }
}

/// A parsed `- text (sources: ...)` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub text: String,
    pub sources: Vec<String>,
}

/// Parses fact-grammar output. Every cited id must be in `allowed`.
pub fn parse_facts(output: &str, allowed: &BTreeSet<&str>) -> std::result::Result<Vec<Fact>, String> {
    let lines: Vec<&str> = output
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err("empty answer".into());
    }
    if lines.len() == 1 && lines[0].eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let mut facts = Vec::new();
    for line in lines {
        let caps = FACT_LINE
            .captures(line)
            .ok_or_else(|| format!("line does not match `{FACT_FORMAT}`: {line}"))?;
        let sources = split_ids(&caps[2]);
        if sources.is_empty() {
            return Err(format!("line cites no sources: {line}"));
        }
        if let Some(bad) = sources.iter().find(|s| !allowed.contains(s.as_str())) {
            return Err(format!("unknown source id `{bad}`"));
        }
        facts.push(Fact {
            text: caps[1].to_string(),
            sources,
        });
    }
    Ok(facts)
}

fn split_ids(s: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for id in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if !out.iter().any(|x| x == id) {
            out.push(id.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheAnswer {
    values: BTreeMap<String, (String, Vec<String>)>,
    ignored: Vec<String>,
}

fn parse_cache(
    output: &str,
    taxonomy: &[String],
    allowed: &BTreeSet<&str>,
) -> std::result::Result<CacheAnswer, String> {
    let mut values = BTreeMap::new();
    let mut ignored = Vec::new();
    let mut any = false;
    for line in output.lines().map(str::trim).filter(|l| !l.is_empty()) {
        any = true;
        let caps = CACHE_LINE
            .captures(line)
            .ok_or_else(|| format!("line does not match `{CACHE_FORMAT}`: {line}"))?;
        let key = caps[1].trim().to_string();
        let text = caps[2].trim().to_string();
        if text.is_empty() {
            return Err(format!("category `{key}` has no description"));
        }
        let sources = caps.get(3).map(|m| split_ids(m.as_str())).unwrap_or_default();
        if let Some(bad) = sources.iter().find(|s| !allowed.contains(s.as_str())) {
            return Err(format!("unknown source id `{bad}`"));
        }
        if !taxonomy.contains(&key) {
            ignored.push(key);
            continue;
        }
        values.entry(key).or_insert((text, sources));
    }
    if !any {
        return Err("empty answer".into());
    }
    Ok(CacheAnswer { values, ignored })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn evidence_lines<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    items
        .into_iter()
        .map(|(id, text)| format!("[{id}] {}", one_line(text)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn fact_lines(facts: &[Fact]) -> String {
    facts
        .iter()
        .map(|f| format!("- {} (sources: {})", f.text, f.sources.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Per-user outcome of [`Refiner::refine_all`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRefineStatus {
    pub user_id: String,
    /// `ok` or the error kind.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub analyzer_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineReport {
    pub users: Vec<UserRefineStatus>,
}

impl RefineReport {
    pub fn ok_count(&self) -> usize {
        self.users.iter().filter(|u| u.status == "ok").count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &UserRefineStatus> {
        self.users.iter().filter(|u| u.status != "ok")
    }
}

pub struct Refiner<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    cfg: &'a RefineConfig,
}

impl<'a> Refiner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, cfg: &'a RefineConfig) -> Self {
        Self {
            gateway,
            templates,
            cfg,
        }
    }

    fn ask(&self, prompt_name: &str, prompt: String, calls: &mut usize) -> Result<String> {
        *calls += 1;
        self.gateway
            .analyze(&AnalyzerRequest::new(prompt_name, prompt))
    }

    fn repair(
        &self,
        prompt_name: &str,
        prompt: &str,
        bad: &str,
        problem: &str,
        format: &str,
        calls: &mut usize,
    ) -> Result<String> {
        let vars = BTreeMap::from([
            ("original_prompt", prompt.to_string()),
            ("bad_output", bad.to_string()),
            ("problem", problem.to_string()),
            ("format", format.to_string()),
        ]);
        let repaired = self.templates.render("repair", &vars)?;
        self.ask(&format!("{prompt_name}_repair"), repaired, calls)
    }

    /// One analyzer call parsed with the fact grammar, with one repair retry.
    fn facts_call(
        &self,
        prompt_name: &str,
        prompt: String,
        allowed: &BTreeSet<&str>,
        calls: &mut usize,
    ) -> Result<Vec<Fact>> {
        let out = self.ask(prompt_name, prompt.clone(), calls)?;
        let problem = match parse_facts(&out, allowed) {
            Ok(f) => return Ok(f),
            Err(p) => p,
        };
        let out = self.repair(prompt_name, &prompt, &out, &problem, FACT_FORMAT, calls)?;
        parse_facts(&out, allowed).map_err(|reason| Error::AnalyzerParseFailure {
            prompt: prompt_name.to_string(),
            reason,
        })
    }

    /// Replaces the DP layer with facts distilled from History in batches of
    /// `batch_size`, followed by one merge call when there was more than one batch.
    /// Returns the number of analyzer calls issued.
    pub fn distill(&self, db: &mut PersonaDatabase) -> Result<usize> {
        if db.history.is_empty() {
            return Err(Error::EmptyHistory(db.user_id.clone()));
        }
        let mut calls = 0;
        let ids: Vec<String> = db.history.iter().map(|r| r.record_id.clone()).collect();
        let facts = self.distill_records(db, &ids, &[], &mut calls)?;
        set_facts(db, Layer::DistilledPersona, "dp", facts);
        Ok(calls)
    }

    /// Distills only `new_ids` and merges the result into the existing DP layer.
    pub fn distill_incremental(&self, db: &mut PersonaDatabase, new_ids: &[String]) -> Result<usize> {
        if db.history.is_empty() {
            return Err(Error::EmptyHistory(db.user_id.clone()));
        }
        let existing: Vec<Fact> = db
            .layer(Layer::DistilledPersona)
            .iter()
            .map(|e| Fact {
                text: e.text.clone(),
                sources: e.provenance.clone(),
            })
            .collect();
        let mut calls = 0;
        let facts = self.distill_records(db, new_ids, &existing, &mut calls)?;
        set_facts(db, Layer::DistilledPersona, "dp", facts);
        Ok(calls)
    }

    fn distill_records(
        &self,
        db: &PersonaDatabase,
        ids: &[String],
        existing: &[Fact],
        calls: &mut usize,
    ) -> Result<Vec<Fact>> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let records: Vec<_> = db
            .history
            .iter()
            .filter(|r| wanted.contains(r.record_id.as_str()))
            .collect();
        let mut facts = existing.to_vec();
        let mut batches = 0;
        for batch in records.chunks(self.cfg.batch_size) {
            batches += 1;
            let allowed: BTreeSet<&str> = batch.iter().map(|r| r.record_id.as_str()).collect();
            let lines = evidence_lines(batch.iter().map(|r| (r.record_id.as_str(), r.text.as_str())));
            let prompt = self
                .templates
                .render("distill", &BTreeMap::from([("records", lines)]))?;
            facts.extend(self.facts_call("distill", prompt, &allowed, calls)?);
        }
        if batches + usize::from(!existing.is_empty()) > 1 && !facts.is_empty() {
            let all = db.history_ids();
            let prompt = self
                .templates
                .render("distill_merge", &BTreeMap::from([("facts", fact_lines(&facts))]))?;
            facts = self.facts_call("distill_merge", prompt, &all, calls)?;
        }
        Ok(facts)
    }

    /// Replaces the IP layer with statements induced from DP (when enabled) and the
    /// most recent `batch_size` History records.
    pub fn induce(&self, db: &mut PersonaDatabase) -> Result<usize> {
        if db.history.is_empty() {
            return Err(Error::EmptyHistory(db.user_id.clone()));
        }
        let mut evidence: Vec<(&str, &str)> = Vec::new();
        if self.cfg.include_dp {
            evidence.extend(
                db.layer(Layer::DistilledPersona)
                    .iter()
                    .map(|e| (e.entry_id.as_str(), e.text.as_str())),
            );
        }
        let skip = db.history.len().saturating_sub(self.cfg.batch_size);
        evidence.extend(
            db.history[skip..]
                .iter()
                .map(|r| (r.record_id.as_str(), r.text.as_str())),
        );
        let allowed: BTreeSet<&str> = evidence.iter().map(|(id, _)| *id).collect();
        let prompt = self
            .templates
            .render("induce", &BTreeMap::from([("evidence", evidence_lines(evidence.iter().copied()))]))?;
        let mut calls = 0;
        let facts = self.facts_call("induce", prompt, &allowed, &mut calls)?;
        set_facts(db, Layer::InducedPersona, "ip", facts);
        Ok(calls)
    }

    /// Fills the cache with exactly one entry per taxonomy key. Keys the analyzer
    /// never fills are set to `unknown`.
    pub fn build_cache(&self, db: &mut PersonaDatabase) -> Result<usize> {
        let taxonomy = self.cfg.taxonomy.clone();
        let mut evidence: Vec<(&str, &str)> = Vec::new();
        for layer in [Layer::DistilledPersona, Layer::InducedPersona] {
            evidence.extend(
                db.layer(layer)
                    .iter()
                    .map(|e| (e.entry_id.as_str(), e.text.as_str())),
            );
        }
        let degraded = evidence.is_empty();
        if degraded {
            if db.history.is_empty() {
                return Err(Error::EmptyHistory(db.user_id.clone()));
            }
            self.gateway.journal().warn(
                format!("refine/cache/{}", db.user_id),
                "no DP or IP entries; cache built from History",
            );
            let skip = db.history.len().saturating_sub(self.cfg.batch_size);
            evidence.extend(
                db.history[skip..]
                    .iter()
                    .map(|r| (r.record_id.as_str(), r.text.as_str())),
            );
        }
        let allowed: BTreeSet<&str> = evidence.iter().map(|(id, _)| *id).collect();
        let all_ids: Vec<String> = evidence.iter().map(|(id, _)| id.to_string()).collect();
        let vars = BTreeMap::from([
            ("evidence", evidence_lines(evidence.iter().copied())),
            (
                "taxonomy",
                taxonomy.iter().map(|k| format!("- {k}")).collect::<Vec<_>>().join("\n"),
            ),
        ]);
        let prompt = self.templates.render("cache", &vars)?;

        let mut calls = 0;
        let first_out = self.ask("cache", prompt.clone(), &mut calls)?;
        let first = parse_cache(&first_out, &taxonomy, &allowed);
        let problem = match &first {
            Ok(a) => {
                let missing: Vec<&str> = taxonomy
                    .iter()
                    .filter(|k| !a.values.contains_key(*k))
                    .map(String::as_str)
                    .collect();
                (!missing.is_empty()).then(|| format!("missing categories: {}", missing.join(", ")))
            }
            Err(p) => Some(p.clone()),
        };
        let answer = match problem {
            None => first.expect("no problem means parsed"),
            Some(problem) => {
                let out = self.repair("cache", &prompt, &first_out, &problem, CACHE_FORMAT, &mut calls)?;
                match (first, parse_cache(&out, &taxonomy, &allowed)) {
                    (Ok(mut a), Ok(b)) => {
                        a.values.extend(b.values);
                        a.ignored.extend(b.ignored);
                        a
                    }
                    (Err(_), Ok(b)) => b,
                    (Ok(a), Err(_)) => a,
                    (Err(_), Err(reason)) => {
                        return Err(Error::AnalyzerParseFailure {
                            prompt: "cache".into(),
                            reason,
                        })
                    }
                }
            }
        };
        let journal = self.gateway.journal();
        for key in &answer.ignored {
            journal.warn(
                format!("refine/cache/{}", db.user_id),
                format!("ignored category `{key}` outside the taxonomy"),
            );
        }

        let created_at = db.latest_timestamp();
        let mut entries = Vec::with_capacity(taxonomy.len());
        for key in &taxonomy {
            let (text, provenance) = match answer.values.get(key) {
                Some((text, _)) if text.eq_ignore_ascii_case(UNKNOWN) => (UNKNOWN.to_string(), vec![]),
                Some((text, sources)) if !sources.is_empty() => (text.clone(), sources.clone()),
                Some((text, _)) => (text.clone(), all_ids.clone()),
                None => {
                    journal.warn(
                        format!("refine/cache/{}", db.user_id),
                        format!("category `{key}` missing after repair; set to unknown"),
                    );
                    (UNKNOWN.to_string(), vec![])
                }
            };
            entries.push(PersonaEntry {
                entry_id: format!("cache:{key}"),
                layer: Layer::Cache,
                key: key.clone(),
                text,
                provenance,
                created_at,
            });
        }
        db.taxonomy = taxonomy;
        db.set_layer(Layer::Cache, entries);
        db.meta.cache_degraded = degraded;
        Ok(calls)
    }

    /// Runs the enabled stages for one database in order. Returns analyzer calls.
    pub fn refine(&self, db: &mut PersonaDatabase) -> Result<usize> {
        if db.history.is_empty() {
            return Err(Error::EmptyHistory(db.user_id.clone()));
        }
        let mut calls = 0;
        if self.cfg.include_dp {
            calls += self.distill(db)?;
        } else {
            db.set_layer(Layer::DistilledPersona, vec![]);
        }
        if self.cfg.include_ip {
            calls += self.induce(db)?;
        } else {
            db.set_layer(Layer::InducedPersona, vec![]);
        }
        calls += self.build_cache(db)?;
        db.meta.prompt_set = self.templates.name.clone();
        Ok(calls)
    }

    /// Refines every listed user, isolating failures per user.
    pub fn refine_all(&self, store: &Store, user_ids: &[String], max_parallel_users: usize) -> RefineReport {
        let users = map_bounded(user_ids, max_parallel_users.max(1), |user| {
            let mut calls = 0;
            let result = (|| {
                let _lock = store.lock_user(user)?;
                let mut db = store.load_database(user)?;
                let n = self.refine(&mut db);
                calls = *n.as_ref().unwrap_or(&0);
                n?;
                store.write_database(&db)
            })();
            match result {
                Ok(()) => UserRefineStatus {
                    user_id: user.clone(),
                    status: "ok".into(),
                    error: None,
                    analyzer_calls: calls,
                },
                Err(e) => UserRefineStatus {
                    user_id: user.clone(),
                    status: e.kind().into(),
                    error: Some(e.to_string()),
                    analyzer_calls: calls,
                },
            }
        });
        RefineReport { users }
    }
}

fn set_facts(db: &mut PersonaDatabase, layer: Layer, prefix: &str, facts: Vec<Fact>) {
    // exact duplicates collapse into one entry with the union of sources
    let mut merged: Vec<Fact> = Vec::new();
    for f in facts {
        match merged.iter_mut().find(|m| m.text == f.text) {
            Some(m) => {
                for s in f.sources {
                    if !m.sources.contains(&s) {
                        m.sources.push(s);
                    }
                }
            }
            None => merged.push(f),
        }
    }
    let created_at = db.latest_timestamp();
    let entries = merged
        .into_iter()
        .enumerate()
        .map(|(i, f)| PersonaEntry {
            entry_id: format!("{prefix}:{i}"),
            layer,
            key: String::new(),
            text: f.text,
            provenance: f.sources,
            created_at,
        })
        .collect();
    db.set_layer(layer, entries);
}

/// Analyzer calls `distill` issues for a history of `len` records: extraction calls
/// plus the merge call.
pub fn expected_distill_calls(len: usize, batch_size: usize) -> (usize, usize) {
    let extract = len.div_ceil(batch_size);
    (extract, usize::from(extract > 1))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::{
        BagOfWords, CallOp, RequestDigests, ScriptedAnalyzer, Transcript, TranscriptMode,
    };
    use crate::store::{RecordKind, UserRecord};

    fn db(n: usize) -> PersonaDatabase {
        let mut db = PersonaDatabase::new("u1", default_taxonomy());
        for i in 0..n {
            db.insert_record(UserRecord::new(
                format!("r{i}"),
                "u1",
                i as i64,
                RecordKind::Post,
                format!("post number {i}"),
            ));
        }
        db
    }

    fn ids_in(prompt: &str) -> Vec<String> {
        prompt
            .lines()
            .filter_map(|l| l.strip_prefix('[').and_then(|r| r.split_once(']')))
            .map(|(id, _)| id.to_string())
            .collect()
    }

    /// Cites every id it is shown; answers every cache category.
    fn echo(req: &AnalyzerRequest) -> Option<String> {
        let p = &req.rendered_prompt;
        match req.prompt_name.as_str() {
            "distill" | "induce" => Some(format!("- a fact (sources: {})", ids_in(p).join(", "))),
            "distill_merge" => {
                let mut ids = Vec::new();
                for l in p.lines() {
                    if let Some((_, rest)) = l.split_once("(sources: ") {
                        ids.extend(
                            rest.trim_end_matches(')')
                                .split(", ")
                                .filter(|id| !id.starts_with('<'))
                                .map(String::from),
                        );
                    }
                }
                Some(format!("- merged fact (sources: {})", ids.join(", ")))
            }
            "cache" => Some(
                default_taxonomy()
                    .iter()
                    .map(|k| format!("- [{k}] something"))
                    .collect::<Vec<_>>()
                    .join("\n"),
            ),
            _ => None,
        }
    }

    fn gateway(responder: impl Fn(&AnalyzerRequest) -> Option<String> + Send + Sync + 'static) -> Gateway {
        Gateway::scripted(
            ScriptedAnalyzer::responder_only(Arc::new(responder)),
            BagOfWords::new(["x"]).unwrap(),
        )
    }

    #[test]
    fn fact_grammar() {
        let allowed: BTreeSet<&str> = ["r1", "r2"].into();
        let f = parse_facts("- likes (solar) power (sources: r1, r2, r1)\n\n", &allowed).unwrap();
        assert_eq!(f[0].text, "likes (solar) power");
        assert_eq!(f[0].sources, ["r1", "r2"]);
        assert_eq!(parse_facts("NONE", &allowed).unwrap(), vec![]);
        assert!(parse_facts("Here are facts:\n- x (sources: r1)", &allowed).is_err());
        assert!(parse_facts("- x (sources: r9)", &allowed).is_err());
        assert!(parse_facts("- x (sources: )", &allowed).is_err());
        assert!(parse_facts("", &allowed).is_err());
    }

    #[test]
    fn call_count_law() {
        let templates = TemplateSet::builtin();
        for (len, extract) in [(1, 1), (49, 1), (50, 1), (51, 2), (120, 3)] {
            let gw = gateway(echo);
            let cfg = RefineConfig::default();
            let mut d = db(len);
            let calls = Refiner::new(&gw, &templates, &cfg).distill(&mut d).unwrap();
            let merge = usize::from(extract > 1);
            assert_eq!(calls, extract + merge, "len {len}");
            assert_eq!(gw.journal().backend_calls(CallOp::Analyze, "distill"), extract);
            assert_eq!(gw.journal().backend_calls(CallOp::Analyze, "distill_merge"), merge);
            assert_eq!(expected_distill_calls(len, 50), (extract, merge));
            d.validate().unwrap();
        }
    }

    #[test]
    fn distill_provenance_from_batch() {
        let templates = TemplateSet::builtin();
        let gw = gateway(|req: &AnalyzerRequest| {
            (req.prompt_name == "distill").then(|| {
                "- likes solar (sources: r0, r1)\n- dislikes taxes (sources: r0, r1)".to_string()
            })
        });
        let cfg = RefineConfig::default();
        let mut d = db(2);
        Refiner::new(&gw, &templates, &cfg).distill(&mut d).unwrap();
        let dp = d.layer(Layer::DistilledPersona);
        assert_eq!(dp.len(), 2);
        for e in dp {
            assert_eq!(e.provenance, ["r0", "r1"]);
        }
        assert!(matches!(
            Refiner::new(&gw, &templates, &cfg).distill(&mut db(0)),
            Err(Error::EmptyHistory(_))
        ));
    }

    #[test]
    fn induce_cites_dp_or_history() {
        let templates = TemplateSet::builtin();
        let gw = gateway(|req: &AnalyzerRequest| {
            req.prompt_name
                .starts_with("induce")
                .then(|| "- cares about fairness (sources: dp:0, dp:1)".to_string())
        });
        let cfg = RefineConfig::default();
        let mut d = db(3);
        set_facts(
            &mut d,
            Layer::DistilledPersona,
            "dp",
            vec![
                Fact { text: "d1".into(), sources: vec!["r0".into()] },
                Fact { text: "d2".into(), sources: vec!["r1".into()] },
            ],
        );
        Refiner::new(&gw, &templates, &cfg).induce(&mut d).unwrap();
        let ip = d.layer(Layer::InducedPersona);
        assert_eq!(ip.len(), 1);
        assert_eq!(ip[0].provenance, ["dp:0", "dp:1"]);

        // without DP the prompt only shows History, so DP ids are rejected twice
        let no_dp = RefineConfig {
            include_dp: false,
            ..RefineConfig::default()
        };
        let err = Refiner::new(&gw, &templates, &no_dp).induce(&mut d).unwrap_err();
        assert!(matches!(err, Error::AnalyzerParseFailure { .. }));
        assert_eq!(gw.journal().backend_calls(CallOp::Analyze, "induce_repair"), 1);

        let gw = gateway(echo);
        let mut fresh = db(3);
        Refiner::new(&gw, &templates, &no_dp).induce(&mut fresh).unwrap();
        assert_eq!(fresh.layer(Layer::InducedPersona)[0].provenance, ["r0", "r1", "r2"]);
    }

    #[test]
    fn repair_retry_recovers() {
        let templates = TemplateSet::builtin();
        let gw = gateway(|req: &AnalyzerRequest| match req.prompt_name.as_str() {
            "distill" => Some("Sure! Here you go: the user likes things".into()),
            "distill_repair" => Some("- likes things (sources: r0)".into()),
            _ => None,
        });
        let cfg = RefineConfig::default();
        let mut d = db(1);
        let calls = Refiner::new(&gw, &templates, &cfg).distill(&mut d).unwrap();
        assert_eq!(calls, 2);
        assert_eq!(d.layer(Layer::DistilledPersona)[0].text, "likes things");
    }

    #[test]
    fn cache_completeness_and_unknowns() {
        let templates = TemplateSet::builtin();
        let five = default_taxonomy()[..5]
            .iter()
            .map(|k| format!("- [{k}] filled"))
            .collect::<Vec<_>>()
            .join("\n");
        let gw = gateway(move |req: &AnalyzerRequest| {
            matches!(req.prompt_name.as_str(), "cache" | "cache_repair").then(|| five.clone())
        });
        let cfg = RefineConfig::default();
        let mut d = db(2);
        set_facts(
            &mut d,
            Layer::DistilledPersona,
            "dp",
            vec![Fact { text: "d".into(), sources: vec!["r0".into()] }],
        );
        Refiner::new(&gw, &templates, &cfg).build_cache(&mut d).unwrap();
        let cache = d.layer(Layer::Cache);
        assert_eq!(cache.len(), 7);
        assert_eq!(cache.iter().filter(|e| e.text == UNKNOWN).count(), 2);
        assert_eq!(cache[0].provenance, ["dp:0"]);
        assert!(!d.meta.cache_degraded);
        let warnings = gw.journal().warnings();
        assert_eq!(warnings.iter().filter(|(_, m)| m.contains("missing after repair")).count(), 2);
        d.validate().unwrap();
    }

    #[test]
    fn cache_falls_back_to_history() {
        let templates = TemplateSet::builtin();
        let gw = gateway(echo);
        let cfg = RefineConfig::default();
        let mut d = db(2);
        Refiner::new(&gw, &templates, &cfg).build_cache(&mut d).unwrap();
        assert!(d.meta.cache_degraded);
        assert_eq!(d.layer(Layer::Cache)[0].provenance, ["r0", "r1"]);
        d.validate().unwrap();
    }

    #[test]
    fn transcript_driven_cache() {
        // a strict transcript: the cache answer must match the exact prompt
        let templates = TemplateSet::builtin();
        let cfg = RefineConfig {
            taxonomy: vec!["interests".into()],
            ..RefineConfig::default()
        };
        let mut d = db(1);
        let vars = BTreeMap::from([
            ("evidence", "[r0] post number 0".to_string()),
            ("taxonomy", "- interests".to_string()),
        ]);
        let prompt = templates.render("cache", &vars).unwrap();
        let req = AnalyzerRequest::new("cache", prompt);
        let mut t = Transcript::new(TranscriptMode::Strict);
        t.insert(RequestDigests::of(&req).full, "- [interests] numbers (sources: r0)");
        let gw = Gateway::scripted(ScriptedAnalyzer::new(t), BagOfWords::new(["x"]).unwrap());
        Refiner::new(&gw, &templates, &cfg).build_cache(&mut d).unwrap();
        assert_eq!(d.cache_text(), "interests: numbers");
    }

    #[test]
    fn refine_all_isolates_failures_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut recs = Vec::new();
        for u in ["a", "b"] {
            for i in 0..3 {
                recs.push(UserRecord::new(format!("{u}{i}"), u, i, RecordKind::Post, "text"));
            }
        }
        store.ingest_records(recs).unwrap();
        let templates = TemplateSet::builtin();
        let cfg = RefineConfig::default();
        let users = vec!["a".to_string(), "b".to_string(), "ghost".to_string()];

        let run = || {
            let gw = gateway(echo);
            let report = Refiner::new(&gw, &templates, &cfg).refine_all(&store, &users, 1);
            let bytes: Vec<Vec<u8>> = ["a", "b"]
                .iter()
                .map(|u| std::fs::read(dir.path().join("users").join(u).join("persona.json")).unwrap())
                .collect();
            (report, bytes)
        };
        let (report, first) = run();
        assert_eq!(report.ok_count(), 2);
        let fail: Vec<_> = report.failures().collect();
        assert_eq!(fail.len(), 1);
        assert_eq!(fail[0].status, "UnknownUser");
        // distill + induce + cache
        assert_eq!(report.users[0].analyzer_calls, 3);
        let (_, second) = run();
        assert_eq!(first, second);
        store.load_database("a").unwrap().validate().unwrap();
    }

    #[test]
    fn ablations_leave_layers_empty() {
        let templates = TemplateSet::builtin();
        let gw = gateway(echo);
        let cfg = RefineConfig {
            include_dp: false,
            ..RefineConfig::default()
        };
        let mut d = db(4);
        Refiner::new(&gw, &templates, &cfg).refine(&mut d).unwrap();
        assert!(d.layer(Layer::DistilledPersona).is_empty());
        assert!(!d.layer(Layer::InducedPersona).is_empty());
        assert_eq!(gw.journal().backend_calls(CallOp::Analyze, "distill"), 0);

        let cfg = RefineConfig {
            include_ip: false,
            ..RefineConfig::default()
        };
        let mut d = db(4);
        Refiner::new(&gw, &templates, &cfg).refine(&mut d).unwrap();
        assert!(d.layer(Layer::InducedPersona).is_empty());
        assert!(!d.layer(Layer::DistilledPersona).is_empty());
    }

    #[test]
    fn incremental_distill_merges() {
        let templates = TemplateSet::builtin();
        let gw = gateway(echo);
        let cfg = RefineConfig::default();
        let mut d = db(3);
        let r = Refiner::new(&gw, &templates, &cfg);
        r.distill(&mut d).unwrap();
        d.insert_record(UserRecord::new("new", "u1", 10, RecordKind::Post, "fresh"));
        let calls = r.distill_incremental(&mut d, &["new".to_string()]).unwrap();
        assert_eq!(calls, 2);
        let dp = d.layer(Layer::DistilledPersona);
        assert_eq!(dp.len(), 1);
        assert!(dp[0].provenance.contains(&"new".to_string()));
        d.validate().unwrap();
    }
}
