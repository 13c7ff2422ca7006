//! The `personadb` command line.
//!
//! Every command reads one TOML config (`--config`) with `--set key=value`
//! overrides and writes its artifacts, the resolved config, a journal and a
//! `manifest.json` into a run directory named `<unix-seconds>-<digest>-<command>`
//! under `run.out_dir`, or into `--out`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::collab::{Collab, CollabSummary};
use crate::config::{BackendKind, ResponderKind, RunConfig};
use crate::digest::short;
use crate::error::{Error, Result};
use crate::eval::cohorts::{cohort_reports, slice};
use crate::eval::{evaluate, render_table, sweep, EvalReport, MethodName, Runner};
use crate::gateway::http::{HttpAnalyzer, HttpClient, HttpEmbedder};
use crate::gateway::{
    BagOfWords, Gateway, Journal, JournalEvent, ScriptedAnalyzer, ScriptedEmbedder, Transcript,
    TranscriptMode,
};
use crate::infer::{load_predictions, load_tasks, Prediction, QueryTask};
use crate::refine::{expected_distill_calls, RefineConfig, Refiner};
use crate::retrieve::Retriever;
use crate::store::{load_corpus, EmbeddingCache, Store};
use crate::synth::{generate_population, OracleKey, SynthResponder};
use crate::template::TemplateSet;

#[derive(Debug, Parser)]
#[command(name = "personadb", version, about = "Hierarchical, collaborative persona databases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set composition.r=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved plan without contacting any backend.
    #[arg(long)]
    pub dry_run: bool,
    /// Run directory to write into instead of a fresh one under `run.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population into the data directory.
    Synth(Common),
    /// Ingest the corpus and refine every user's persona layers.
    Build {
        #[command(flatten)]
        common: Common,
        /// Refine only these users.
        #[arg(long)]
        user: Vec<String>,
    },
    /// Embed every user's cache layer.
    EmbedCache(Common),
    /// Select collaborators and write `collab.json`.
    Join {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Vec<String>,
    },
    /// Compose a retrieval set for one user and query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: String,
        #[arg(long)]
        query: String,
    },
    /// Predict the evaluated tasks with `method.name`.
    Predict(Common),
    /// Score a predictions file, or compare the `method.compare` methods.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Sweep retrieval capacity and composition ratio.
    Sweep(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Build { .. } => "build",
            Command::EmbedCache(_) => "embed-cache",
            Command::Join { .. } => "join",
            Command::Retrieve { .. } => "retrieve",
            Command::Predict(_) => "predict",
            Command::Eval { .. } => "eval",
            Command::Sweep(_) => "sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::EmbedCache(c) | Command::Predict(c) | Command::Sweep(c) => c,
            Command::Build { common, .. }
            | Command::Join { common, .. }
            | Command::Retrieve { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

/// What a finished command reports on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub status: &'static str,
    pub command: &'static str,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    pub summary: Value,
    /// Some units of work failed; the exit status is 2.
    #[serde(skip)]
    pub partial: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: &'a str,
    started_unix: u64,
    finished_unix: u64,
    artifacts: &'a [String],
    summary: &'a Value,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct RunDir {
    path: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    fn create(path: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }
}

/// Shared state of one command invocation.
struct Ctx {
    cfg: RunConfig,
    digest: String,
    dir: RunDir,
    journal: Arc<Journal>,
}

impl Ctx {
    fn store(&self) -> Result<Store> {
        Store::open_with_taxonomy(&self.cfg.data.store, self.cfg.refine.taxonomy.clone())
    }

    fn templates(&self) -> Result<TemplateSet> {
        templates(&self.cfg)
    }

    fn tasks(&self) -> Result<Vec<QueryTask>> {
        load_tasks(&self.cfg.tasks_path())
    }

    fn gateway(&self, store: &Store) -> Result<Gateway> {
        build_gateway(&self.cfg, store, self.journal.clone())
    }
}

fn templates(cfg: &RunConfig) -> Result<TemplateSet> {
    match &cfg.data.prompts {
        Some(dir) => TemplateSet::load_dir(dir),
        None => Ok(TemplateSet::builtin()),
    }
}

/// Builds the configured backend pair with a persistent embedding cache in the store.
pub fn build_gateway(cfg: &RunConfig, store: &Store, journal: Arc<Journal>) -> Result<Gateway> {
    let b = &cfg.backend;
    let gateway = match b.kind {
        BackendKind::Scripted => {
            let transcript = match &b.transcript {
                Some(p) => Transcript::load(p, b.transcript_mode)?,
                None => Transcript::new(b.transcript_mode),
            };
            let mut analyzer = ScriptedAnalyzer::new(transcript);
            if b.transcript_mode == TranscriptMode::Fallback && b.responder == ResponderKind::Synth {
                let oracle_path = cfg.oracle_path();
                let oracle = if oracle_path.exists() {
                    Some(OracleKey::load(&oracle_path)?)
                } else {
                    None
                };
                analyzer = analyzer.with_responder(Arc::new(SynthResponder::new(
                    cfg.synth.domains.clone(),
                    oracle,
                )));
            }
            let vocab = cfg.vocab_path();
            if !vocab.exists() {
                return Err(Error::ConfigError(format!(
                    "scripted backend needs a vocabulary file at {}",
                    vocab.display()
                )));
            }
            let bow = BagOfWords::load(&vocab)?;
            let cache = EmbeddingCache::open(store.embeddings_dir(), bow.dims())?;
            Gateway::new(
                Box::new(analyzer),
                Box::new(ScriptedEmbedder::BagOfWords(bow)),
                cache,
            )?
        }
        BackendKind::Http => {
            let client = Arc::new(HttpClient::from_env(b.http.clone()));
            let cache = EmbeddingCache::open(store.embeddings_dir(), b.http.dims)?;
            Gateway::new(
                Box::new(HttpAnalyzer::new(client.clone())),
                Box::new(HttpEmbedder::new(client)),
                cache,
            )?
        }
    };
    let gateway = gateway.with_journal(journal);
    Ok(match b.requests_per_minute {
        Some(rpm) => gateway.with_rate_limit(rpm),
        None => gateway,
    })
}

/// Parses arguments, runs the command and maps the result to an exit status.
/// Errors are printed to stderr as one JSON object.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match execute(&cli.command) {
        Ok(outcome) => {
            let line = serde_json::to_string(&outcome).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{line}");
            if outcome.partial {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{}", error_record(name, &e));
            ExitCode::FAILURE
        }
    }
}

/// Machine-readable failure record.
pub fn error_record(command: &str, e: &Error) -> Value {
    json!({
        "status": "error",
        "command": command,
        "kind": e.kind(),
        "message": e.to_string(),
    })
}

/// Runs one command. The dry-run path never builds a gateway.
pub fn execute(cmd: &Command) -> Result<Outcome> {
    let common = cmd.common();
    let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
    let digest = cfg.digest()?;
    if common.dry_run {
        let summary = plan(cmd, &cfg)?;
        return Ok(Outcome {
            status: "dry_run",
            command: cmd.name(),
            config_digest: digest,
            run_dir: None,
            summary,
            partial: false,
        });
    }

    let started = unix_now();
    let path = common.out.clone().unwrap_or_else(|| {
        cfg.run
            .out_dir
            .join(format!("{started}-{}-{}", short(&digest), cmd.name()))
    });
    let mut dir = RunDir::create(path)?;
    let journal = Arc::new(Journal::to_file(&dir.path.join("journal.jsonl"))?);
    dir.artifacts.push("journal.jsonl".into());
    journal.record(JournalEvent::Config {
        digest: digest.clone(),
        resolved: cfg.to_json()?,
    });
    dir.write("config.toml", cfg.to_toml()?)?;
    let mut ctx = Ctx {
        cfg,
        digest,
        dir,
        journal,
    };

    let result = dispatch(cmd, &mut ctx);
    let (summary, partial) = match result {
        Ok(v) => v,
        Err(e) => {
            let record = error_record(cmd.name(), &e);
            ctx.dir.write_json("error.json", &record)?;
            return Err(e);
        }
    };
    let manifest = Manifest {
        command: cmd.name(),
        config_digest: &ctx.digest,
        started_unix: started,
        finished_unix: unix_now(),
        artifacts: &ctx.dir.artifacts.clone(),
        summary: &summary,
    };
    ctx.dir.write_json("manifest.json", &manifest)?;
    Ok(Outcome {
        status: if partial { "partial" } else { "ok" },
        command: cmd.name(),
        config_digest: ctx.digest,
        run_dir: Some(ctx.dir.path),
        summary,
        partial,
    })
}

fn dispatch(cmd: &Command, ctx: &mut Ctx) -> Result<(Value, bool)> {
    match cmd {
        Command::Synth(_) => cmd_synth(ctx),
        Command::Build { user, .. } => cmd_build(ctx, user),
        Command::EmbedCache(_) => cmd_embed_cache(ctx),
        Command::Join { user, .. } => cmd_join(ctx, user),
        Command::Retrieve { user, query, .. } => cmd_retrieve(ctx, user, query),
        Command::Predict(_) => cmd_predict(ctx),
        Command::Eval { predictions, .. } => cmd_eval(ctx, predictions.as_deref()),
        Command::Sweep(_) => cmd_sweep(ctx),
    }
}

fn cmd_synth(ctx: &mut Ctx) -> Result<(Value, bool)> {
    let pop = generate_population(&ctx.cfg.synth)?;
    pop.write_to(&ctx.cfg.data.dir)?;
    ctx.dir.write_json("users.json", &pop.users)?;
    Ok((
        json!({
            "data_dir": ctx.cfg.data.dir,
            "users": pop.users.len(),
            "lurkers": pop.users.iter().filter(|u| u.lurker).count(),
            "records": pop.records.len(),
            "tasks": pop.tasks.len(),
            "cold_start_tasks": pop.cold_start_tasks().len(),
        }),
        false,
    ))
}

/// Adds corpus records the store does not hold yet. Re-running on the same
/// corpus adds nothing.
fn ingest_new(store: &Store, corpus: &Path) -> Result<usize> {
    let records = load_corpus(corpus)?;
    let mut known: BTreeSet<String> = BTreeSet::new();
    for u in store.user_ids()? {
        known.extend(store.load_database(&u)?.history.into_iter().map(|r| r.record_id));
    }
    let fresh: Vec<_> = records
        .into_iter()
        .filter(|r| !known.contains(&r.record_id))
        .collect();
    let n = fresh.len();
    store.ingest_records(fresh)?;
    Ok(n)
}

fn cmd_build(ctx: &mut Ctx, only: &[String]) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let added = ingest_new(&store, &ctx.cfg.corpus_path())?;
    let gw = ctx.gateway(&store)?;
    let templates = ctx.templates()?;
    let users = if only.is_empty() {
        store.user_ids()?
    } else {
        only.to_vec()
    };
    let report = Refiner::new(&gw, &templates, &ctx.cfg.refine).refine_all(
        &store,
        &users,
        ctx.cfg.run.max_parallel,
    );
    ctx.dir.write_json("refine_report.json", &report)?;
    let failed = report.users.len() - report.ok_count();
    Ok((
        json!({
            "records_added": added,
            "users": report.users.len(),
            "refined": report.ok_count(),
            "failed": failed,
        }),
        failed > 0,
    ))
}

fn cmd_embed_cache(ctx: &mut Ctx) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let gw = ctx.gateway(&store)?;
    let collab = Collab::new(&gw, &store, ctx.cfg.join.clone())?.with_max_parallel(ctx.cfg.run.max_parallel);
    collab.warm()?;
    let mut rows = Vec::new();
    let mut missing = 0;
    for u in store.user_ids()? {
        let v = collab.cache_vector(&u)?;
        if v.is_none() {
            missing += 1;
        }
        rows.push(json!({"user_id": u, "embedded": v.is_some()}));
    }
    ctx.dir.write_json("embed_cache.json", &rows)?;
    Ok((
        json!({"users": rows.len(), "without_vector": missing, "dims": gw.dims()}),
        false,
    ))
}

fn cmd_join(ctx: &mut Ctx, only: &[String]) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let gw = ctx.gateway(&store)?;
    let collab = Collab::new(&gw, &store, ctx.cfg.join.clone())?.with_max_parallel(ctx.cfg.run.max_parallel);
    let users = if only.is_empty() {
        store.user_ids()?
    } else {
        only.to_vec()
    };
    let mut joins = Vec::new();
    let mut failures = Vec::new();
    for u in &users {
        match collab.join(u) {
            Ok(j) => joins.push(CollabSummary::new(&j, &ctx.cfg.join)),
            Err(e) => {
                gw.journal().warn(format!("join/{u}"), e.to_string());
                failures.push(json!({"user_id": u, "kind": e.kind(), "error": e.to_string()}));
            }
        }
    }
    ctx.dir.write_json("collab.json", &joins)?;
    if !failures.is_empty() {
        ctx.dir.write_json("join_failures.json", &failures)?;
    }
    Ok((
        json!({"users": users.len(), "joined": joins.len(), "failed": failures.len()}),
        !failures.is_empty(),
    ))
}

fn cmd_retrieve(ctx: &mut Ctx, user: &str, query: &str) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let gw = ctx.gateway(&store)?;
    let comp = ctx.cfg.method_config(ctx.cfg.method.name).effective_composition();
    let collab = if comp.x > 0.0 {
        Some(Collab::new(&gw, &store, ctx.cfg.join.clone())?.with_max_parallel(ctx.cfg.run.max_parallel))
    } else {
        None
    };
    let set = Retriever::new(&gw)
        .with_max_in_flight(ctx.cfg.run.max_parallel)
        .retrieve(&store, collab.as_ref(), user, query, &comp)?;
    ctx.dir.write_json("retrieval.json", &set)?;
    Ok((
        json!({"items": set.items.len(), "n_self": set.n_self, "n_collab": set.n_collab}),
        false,
    ))
}

fn write_run(ctx: &mut Ctx, prefix: &str, run: &crate::eval::MethodRun) -> Result<()> {
    ctx.dir.write(&format!("{prefix}predictions.jsonl"), run.predictions_jsonl()?)?;
    ctx.dir.write_json(&format!("{prefix}report.json"), &run.report)?;
    if !run.failures.is_empty() {
        ctx.dir.write_json(&format!("{prefix}failures.json"), &run.failures)?;
    }
    Ok(())
}

fn cmd_predict(ctx: &mut Ctx) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let gw = ctx.gateway(&store)?;
    let templates = ctx.templates()?;
    let tasks = ctx.tasks()?;
    let runner = Runner::new(&gw, &store, &templates).with_max_parallel(ctx.cfg.run.max_parallel);
    let run = runner.run_method(&ctx.cfg.method_config(ctx.cfg.method.name), &tasks)?;
    write_run(ctx, "", &run)?;
    Ok((
        json!({
            "method": run.method,
            "predictions": run.predictions.len(),
            "failed": run.failures.len(),
            "report": run.report,
        }),
        !run.failures.is_empty(),
    ))
}

fn history_lens(store: &Store) -> Result<BTreeMap<String, usize>> {
    store
        .user_ids()?
        .into_iter()
        .map(|u| {
            let n = store.load_database(&u)?.history.len();
            Ok((u, n))
        })
        .collect()
}

fn cmd_eval(ctx: &mut Ctx, predictions: Option<&Path>) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let tasks = ctx.tasks()?;
    let evaluated: Vec<&QueryTask> = tasks.iter().filter(|t| !t.is_train()).collect();
    let cohorts = slice(&history_lens(&store)?, &ctx.cfg.cohorts)?;

    let runs: Vec<(String, Vec<Prediction>, EvalReport)> = match predictions {
        Some(path) => {
            let preds = load_predictions(path)?;
            let report = evaluate(&evaluated, &preds);
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            vec![(name, preds, report)]
        }
        None => {
            let gw = ctx.gateway(&store)?;
            let templates = ctx.templates()?;
            let runner = Runner::new(&gw, &store, &templates).with_max_parallel(ctx.cfg.run.max_parallel);
            let mut out = Vec::new();
            for m in ctx.cfg.method.compare.clone() {
                let run = runner.run_method(&ctx.cfg.method_config(m), &tasks)?;
                write_run(ctx, &format!("methods/{m}/"), &run)?;
                out.push((m.to_string(), run.predictions, run.report));
            }
            out
        }
    };

    let rows: Vec<(String, EvalReport)> = runs.iter().map(|(n, _, r)| (n.clone(), r.clone())).collect();
    let table = render_table(&rows);
    ctx.dir.write("table.txt", &table)?;
    let reports: BTreeMap<&str, &EvalReport> = runs.iter().map(|(n, _, r)| (n.as_str(), r)).collect();
    ctx.dir.write_json("report.json", &reports)?;
    let by_cohort: BTreeMap<&str, _> = runs
        .iter()
        .map(|(n, p, _)| (n.as_str(), cohort_reports(&evaluated, p, &cohorts)))
        .collect();
    ctx.dir.write_json("cohorts.json", &by_cohort)?;
    Ok((json!({"table": table, "reports": reports}), false))
}

fn cmd_sweep(ctx: &mut Ctx) -> Result<(Value, bool)> {
    let store = ctx.store()?;
    let gw = ctx.gateway(&store)?;
    let templates = ctx.templates()?;
    let tasks = ctx.tasks()?;
    let runner = Runner::new(&gw, &store, &templates).with_max_parallel(ctx.cfg.run.max_parallel);
    let base = ctx.cfg.method_config(ctx.cfg.method.name);
    let result = sweep(&runner, &base, &ctx.cfg.sweep.r_values, &ctx.cfg.sweep.x_values, &tasks);
    ctx.dir.write("sweep.csv", result.to_csv())?;
    ctx.dir.write("sweep_failures.json", result.failures_json()?)?;
    let failed = result.cells.iter().filter(|c| c.reason.is_some()).count();
    Ok((json!({"cells": result.cells.len(), "incomplete": failed}), false))
}

/// Expected backend work for `cmd`, computed from files alone.
fn plan(cmd: &Command, cfg: &RunConfig) -> Result<Value> {
    let store_users = || -> Result<BTreeMap<String, usize>> {
        if cfg.data.store.exists() {
            history_lens(&Store::open(&cfg.data.store)?)
        } else {
            Ok(BTreeMap::new())
        }
    };
    Ok(match cmd {
        Command::Synth(_) => json!({
            "data_dir": cfg.data.dir,
            "users": cfg.synth.n_users,
            "lurkers": cfg.synth.n_lurkers(),
            "backend_calls": 0,
        }),
        Command::Build { user, .. } => {
            let mut lens = store_users()?;
            let corpus = cfg.corpus_path();
            if corpus.exists() {
                let mut known: BTreeSet<String> = BTreeSet::new();
                if cfg.data.store.exists() {
                    let store = Store::open(&cfg.data.store)?;
                    for u in store.user_ids()? {
                        known.extend(store.load_database(&u)?.history.into_iter().map(|r| r.record_id));
                    }
                }
                for r in load_corpus(&corpus)? {
                    if !known.contains(&r.record_id) {
                        *lens.entry(r.user_id).or_default() += 1;
                    }
                }
            }
            if !user.is_empty() {
                lens.retain(|u, _| user.contains(u));
            }
            let calls = plan_refine(&cfg.refine, &lens);
            json!({"users": lens.len(), "analyzer_calls": calls, "embed_calls": 0})
        }
        Command::EmbedCache(_) | Command::Join { .. } => {
            let n = store_users()?.len();
            json!({"users": n, "analyzer_calls": 0, "embed_calls_max": n})
        }
        Command::Retrieve { .. } => json!({"analyzer_calls": 0, "retrievals": 1}),
        Command::Predict(_) => {
            let n = evaluated_count(cfg)?;
            let calls = if cfg.method.name.template().is_some() { n } else { 0 };
            json!({"method": cfg.method.name, "tasks": n, "predicted_calls": calls})
        }
        Command::Eval { predictions: Some(_), .. } => json!({"predicted_calls": 0}),
        Command::Eval { .. } => {
            let n = evaluated_count(cfg)?;
            let per: BTreeMap<MethodName, usize> = cfg
                .method
                .compare
                .iter()
                .map(|m| (*m, if m.template().is_some() { n } else { 0 }))
                .collect();
            json!({"tasks": n, "predicted_calls": per.values().sum::<usize>(), "per_method": per})
        }
        Command::Sweep(_) => {
            let n = evaluated_count(cfg)?;
            let cells = cfg.sweep.r_values.len() * cfg.sweep.x_values.len();
            json!({"cells": cells, "tasks": n, "predicted_calls": cells * n})
        }
    })
}

fn evaluated_count(cfg: &RunConfig) -> Result<usize> {
    Ok(load_tasks(&cfg.tasks_path())?.iter().filter(|t| !t.is_train()).count())
}

fn plan_refine(cfg: &RefineConfig, lens: &BTreeMap<String, usize>) -> usize {
    lens.values()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let (extract, merge) = expected_distill_calls(n, cfg.batch_size);
            let dp = if cfg.include_dp { extract + merge } else { 0 };
            let ip = usize::from(cfg.include_ip);
            dp + ip + 1
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("personadb").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn parses_subcommands_and_overrides() {
        let c = parse(&["predict", "--set", "composition.r=8", "--set", "method.name=random", "--dry-run"]);
        assert_eq!(c.name(), "predict");
        assert_eq!(c.common().set.len(), 2);
        assert!(c.common().dry_run);
        assert_eq!(parse(&["embed-cache"]).name(), "embed-cache");
        assert!(Cli::try_parse_from(["personadb", "frobnicate"]).is_err());
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let e = execute(&parse(&["synth", "--set", "composition.x=7", "--dry-run"])).unwrap_err();
        assert_eq!(error_record("synth", &e)["kind"], "ConfigError");
    }

    #[test]
    fn refine_plan_counts() {
        let lens: BTreeMap<String, usize> = [("a", 1), ("b", 120), ("c", 0)]
            .iter()
            .map(|(u, n)| (u.to_string(), *n))
            .collect();
        // a: 1 extract + induce + cache; b: 3 extracts + merge + induce + cache
        assert_eq!(plan_refine(&RefineConfig::default(), &lens), 3 + 6);
    }
}
