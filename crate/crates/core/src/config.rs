//! Run configuration: one TOML file, dotted `--set` overrides, a digest of the
//! resolved result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collab::JoinConfig;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::eval::{CohortThresholds, MethodConfig, MethodName};
use crate::gateway::http::HttpConfig;
use crate::gateway::TranscriptMode;
use crate::refine::RefineConfig;
use crate::retrieve::CompositionConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponderKind {
    /// Rule-based refinement plus the oracle key in the data directory.
    #[default]
    Synth,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Analyzer transcript (JSONL) for the scripted backend.
    pub transcript: Option<PathBuf>,
    pub transcript_mode: TranscriptMode,
    /// Answers transcript misses in fallback mode.
    pub responder: ResponderKind,
    /// Bag-of-words vocabulary; defaults to `vocab.txt` in the data directory.
    pub vocab: Option<PathBuf>,
    pub requests_per_minute: Option<u32>,
    pub http: HttpConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            transcript: None,
            transcript_mode: TranscriptMode::Fallback,
            responder: ResponderKind::Synth,
            vocab: None,
            requests_per_minute: None,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Holds `corpus.jsonl`, `tasks.jsonl` and, for synthetic data, `oracle.json`
    /// and `vocab.txt`.
    pub dir: PathBuf,
    pub store: PathBuf,
    /// Prompt template directory; the built-in set when unset.
    pub prompts: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            store: "store".into(),
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: MethodName,
    /// Methods compared by `eval`.
    pub compare: Vec<MethodName>,
    pub seed: u64,
    pub char_budget: Option<usize>,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            name: MethodName::PersonaDb,
            compare: MethodName::ALL.to_vec(),
            seed: 0,
            char_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub max_parallel: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: "runs".into(),
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub r_values: Vec<usize>,
    pub x_values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            r_values: vec![10, 20, 40, 80],
            x_values: crate::eval::x_grid(0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub refine: RefineConfig,
    pub join: JoinConfig,
    pub composition: CompositionConfig,
    pub method: MethodSection,
    pub sweep: SweepSection,
    pub cohorts: CohortThresholds,
    pub run: RunSection,
    pub synth: SynthConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::ConfigError(e.to_string())
}

/// Sets `path` (dotted) in `table`, creating intermediate tables. The value is
/// parsed as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text` with `overrides` applied on top. Precedence is overrides,
    /// then the file, then defaults.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`). Relative data, store and output
    /// paths resolve against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let Some(path) = path else {
            return Self::parse("", overrides);
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, overrides)
            .map_err(|e| config_err(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.data.store);
        fix(&mut self.run.out_dir);
        for p in [&mut self.data.prompts, &mut self.backend.transcript, &mut self.backend.vocab]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        self.join.validate()?;
        self.composition.validate()?;
        self.cohorts.validate()?;
        self.method_config(self.method.name).validate()?;
        if self.run.max_parallel == 0 {
            return Err(config_err("run.max_parallel must be positive"));
        }
        Ok(())
    }

    pub fn method_config(&self, name: MethodName) -> MethodConfig {
        MethodConfig {
            name,
            composition: self.composition.clone(),
            join: self.join.clone(),
            seed: self.method.seed,
            char_budget: self.method.char_budget,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Digest of the resolved configuration.
    pub fn digest(&self) -> Result<String> {
        Ok(json_digest(&self.to_json()?))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.data.dir.join(crate::synth::CORPUS_FILE)
    }

    pub fn tasks_path(&self) -> PathBuf {
        self.data.dir.join(crate::synth::TASKS_FILE)
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.data.dir.join(crate::synth::ORACLE_FILE)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.backend
            .vocab
            .clone()
            .unwrap_or_else(|| self.data.dir.join(crate::synth::VOCAB_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Layer;

    #[test]
    fn defaults_match_the_shipped_profile() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.composition.r, 40);
        assert_eq!(c.composition.x, 0.25);
        assert_eq!(c.join.k, 5);
        assert_eq!(c.refine.batch_size, 50);
    }

    #[test]
    fn override_precedence() {
        let text = "[composition]\nr = 10\nx = 0.5\n";
        let c = RunConfig::parse(text, &[]).unwrap();
        assert_eq!((c.composition.r, c.composition.x), (10, 0.5));
        let c = RunConfig::parse(
            text,
            &[
                "composition.r=8".into(),
                "method.name=persona_db_wo_join".into(),
                "composition.pool_layers=[\"DistilledPersona\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!((c.composition.r, c.composition.x), (8, 0.5));
        assert_eq!(c.method.name, MethodName::PersonaDbWoJoin);
        assert_eq!(c.composition.pool_layers, vec![Layer::DistilledPersona]);
        let resolved = c.to_toml().unwrap();
        assert!(resolved.contains("r = 8"));
        assert_eq!(RunConfig::parse(&resolved, &[]).unwrap(), c);
        assert_ne!(c.digest().unwrap(), RunConfig::default().digest().unwrap());
    }

    #[test]
    fn malformed_configs_name_the_problem() {
        let e = RunConfig::parse("[composition]\nr = \n", &[]).unwrap_err();
        assert!(matches!(e, Error::ConfigError(_)));
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::parse("[composition]\nrr = 3\n", &[]).unwrap_err();
        assert!(e.to_string().contains("rr"), "{e}");
        let e = RunConfig::parse("[composition]\nx = 2.0\n", &[]).unwrap_err();
        assert_eq!(e.kind(), "ConfigError");
        assert!(e.to_string().contains("composition.x"));
        assert!(RunConfig::parse("", &["nokey".into()]).is_err());
        assert!(RunConfig::parse("", &["method.name=bogus".into()]).is_err());
    }
}
