use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::collab::{Collab, JoinConfig};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{AnalyzerRequest, Gateway, JournalEvent};
use crate::infer::{
    self, format_label, Assembler, Context, Label, ParseStatus, Polarity, Prediction, QueryTask,
    TaskKind,
};
use crate::parallel::map_bounded;
use crate::retrieve::{CompositionConfig, RetrievalItem, RetrievalSet, Retriever, Source};
use crate::store::{Layer, Store};
use crate::template::TemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    PersonaDb,
    PersonaDbWoJoin,
    PersonaDbWoIp,
    PersonaDbWoDp,
    HRetrieval,
    HRecency,
    HistoryFull,
    Intsum,
    Random,
    Majority,
}

impl MethodName {
    pub const ALL: [MethodName; 10] = [
        MethodName::PersonaDb,
        MethodName::PersonaDbWoJoin,
        MethodName::PersonaDbWoIp,
        MethodName::PersonaDbWoDp,
        MethodName::HRetrieval,
        MethodName::HRecency,
        MethodName::HistoryFull,
        MethodName::Intsum,
        MethodName::Random,
        MethodName::Majority,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::PersonaDb => "persona_db",
            MethodName::PersonaDbWoJoin => "persona_db_wo_join",
            MethodName::PersonaDbWoIp => "persona_db_wo_ip",
            MethodName::PersonaDbWoDp => "persona_db_wo_dp",
            MethodName::HRetrieval => "h_retrieval",
            MethodName::HRecency => "h_recency",
            MethodName::HistoryFull => "history_full",
            MethodName::Intsum => "intsum",
            MethodName::Random => "random",
            MethodName::Majority => "majority",
        }
    }

    /// Prediction template, or `None` for methods that never call the analyzer.
    pub fn template(self) -> Option<&'static str> {
        match self {
            MethodName::PersonaDb | MethodName::PersonaDbWoIp | MethodName::PersonaDbWoDp => {
                Some("predict_full")
            }
            MethodName::PersonaDbWoJoin => Some("predict_wo_join"),
            MethodName::HRetrieval
            | MethodName::HRecency
            | MethodName::HistoryFull
            | MethodName::Intsum => Some("predict_baseline"),
            MethodName::Random | MethodName::Majority => None,
        }
    }

    pub fn uses_join(self) -> bool {
        matches!(
            self,
            MethodName::PersonaDb | MethodName::PersonaDbWoIp | MethodName::PersonaDbWoDp
        )
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::ConfigError(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub name: MethodName,
    pub composition: CompositionConfig,
    pub join: JoinConfig,
    pub seed: u64,
    /// Character budget for evidence in prediction prompts.
    pub char_budget: Option<usize>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: MethodName::PersonaDb,
            composition: CompositionConfig::default(),
            join: JoinConfig::default(),
            seed: 0,
            char_budget: None,
        }
    }
}

impl MethodConfig {
    pub fn new(name: MethodName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    /// The composition this method actually retrieves with.
    pub fn effective_composition(&self) -> CompositionConfig {
        let mut c = self.composition.clone();
        match self.name {
            MethodName::PersonaDb => {}
            MethodName::PersonaDbWoJoin => c.x = 0.0,
            MethodName::PersonaDbWoIp => c.pool_layers.retain(|l| *l != Layer::InducedPersona),
            MethodName::PersonaDbWoDp => c.pool_layers.retain(|l| *l != Layer::DistilledPersona),
            MethodName::HRetrieval
            | MethodName::HRecency
            | MethodName::HistoryFull
            | MethodName::Intsum
            | MethodName::Random
            | MethodName::Majority => {
                c.x = 0.0;
                c.pool_layers = vec![Layer::History];
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.join.validate()?;
        let c = self.effective_composition();
        if c.pool_layers.is_empty() {
            return Err(Error::ConfigError(format!(
                "{} leaves no pool layers",
                self.name
            )));
        }
        c.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub kind: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: MethodName,
    pub predictions: Vec<Prediction>,
    pub failures: Vec<TaskFailure>,
    pub report: EvalReport,
}

impl MethodRun {
    pub fn predictions_jsonl(&self) -> Result<Vec<u8>> {
        infer::jsonl_bytes(&self.predictions)
    }
}

/// Maximum characters of history shown to the summarizer.
pub const INTSUM_HISTORY_CHARS: usize = 8000;

/// Runs methods over task sets against one store and gateway.
pub struct Runner<'a> {
    gateway: &'a Gateway,
    store: &'a Store,
    templates: &'a TemplateSet,
    max_parallel: usize,
    collabs: Mutex<Vec<(String, Arc<Collab<'a>>)>>,
    summaries: Mutex<HashMap<(String, TaskKind), String>>,
}

impl<'a> Runner<'a> {
    pub fn new(gateway: &'a Gateway, store: &'a Store, templates: &'a TemplateSet) -> Self {
        Self {
            gateway,
            store,
            templates,
            max_parallel: 1,
            collabs: Mutex::new(Vec::new()),
            summaries: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    /// One shared join engine per join config.
    pub fn collab(&self, cfg: &JoinConfig) -> Result<Arc<Collab<'a>>> {
        let digest = cfg.digest();
        let mut collabs = self.collabs.lock().unwrap();
        if let Some((_, c)) = collabs.iter().find(|(d, _)| *d == digest) {
            return Ok(c.clone());
        }
        let c = Arc::new(
            Collab::new(self.gateway, self.store, cfg.clone())?.with_max_parallel(self.max_parallel),
        );
        collabs.push((digest, c.clone()));
        Ok(c)
    }

    /// Task-conditioned summary of the user's history, one analyzer call per
    /// (user, task kind).
    pub fn intsum(&self, user: &str, kind: TaskKind) -> Result<String> {
        let key = (user.to_string(), kind);
        if let Some(s) = self.summaries.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let db = self.store.load_database(user)?;
        if db.history.is_empty() {
            return Err(Error::EmptyHistory(user.to_string()));
        }
        let mut lines = Vec::new();
        let mut used = 0;
        for r in db.history.iter().rev() {
            let line = format!("[{}] {}", r.record_id, r.text.split_whitespace().collect::<Vec<_>>().join(" "));
            if used + line.len() > INTSUM_HISTORY_CHARS && !lines.is_empty() {
                break;
            }
            used += line.len() + 1;
            lines.push(line);
        }
        lines.reverse();
        let vars = BTreeMap::from([
            ("history", lines.join("\n")),
            ("task_kind", kind.as_str().replace('_', " ")),
        ]);
        let prompt = self.templates.render("intsum", &vars)?;
        let summary = self
            .gateway
            .analyze(&AnalyzerRequest::new("intsum", prompt))?;
        self.summaries.lock().unwrap().insert(key, summary.clone());
        Ok(summary)
    }

    fn history_items(&self, user: &str, recent: Option<usize>) -> Result<RetrievalSet> {
        let db = self.store.load_database(user)?;
        let mut items: Vec<RetrievalItem> = db
            .history
            .iter()
            .map(|r| RetrievalItem {
                id: r.record_id.clone(),
                text: r.text.clone(),
                source: Source::Own,
                source_user: user.to_string(),
                layer: Layer::History,
                score: None,
                timestamp: r.timestamp,
            })
            .collect();
        if let Some(r) = recent {
            items.reverse();
            items.truncate(r);
        }
        let mut set = RetrievalSet::empty(user);
        set.n_self = items.len();
        set.items = items;
        Ok(set)
    }

    fn context(&self, method: &MethodConfig, comp: &CompositionConfig, task: &QueryTask) -> Result<Context> {
        let retriever = Retriever::new(self.gateway);
        Ok(match method.name {
            MethodName::HRecency => Context::Retrieved(self.history_items(&task.user_id, Some(comp.r))?),
            MethodName::HistoryFull => Context::Retrieved(self.history_items(&task.user_id, None)?),
            MethodName::Intsum => Context::Summary(self.intsum(&task.user_id, task.kind)?),
            _ => {
                let collab = if comp.x > 0.0 {
                    Some(self.collab(&method.join)?)
                } else {
                    None
                };
                Context::Retrieved(retriever.retrieve(
                    self.store,
                    collab.as_deref(),
                    &task.user_id,
                    &task.stimulus,
                    comp,
                )?)
            }
        })
    }

    fn predict_one(&self, method: &MethodConfig, comp: &CompositionConfig, task: &QueryTask) -> Result<Prediction> {
        let template = method.name.template().expect("analyzer-backed method");
        let context = self.context(method, comp, task)?;
        let assembler = Assembler::new(self.templates).with_budget(method.char_budget);
        infer::predict(self.gateway, &assembler, task, &context, template, method.name.as_str())
    }

    fn fixed(&self, method: &MethodConfig, task: &QueryTask, label: Label) -> Prediction {
        let raw = format_label(&label, task.options.len());
        self.gateway.journal().record(JournalEvent::Prediction {
            task_id: task.task_id.clone(),
            user_id: task.user_id.clone(),
            method: method.name.as_str().into(),
            retrieval_digest: String::new(),
            prompt_digest: String::new(),
            raw_output: raw.clone(),
            parse_status: ParseStatus::Clean.as_str().into(),
        });
        Prediction {
            task_id: task.task_id.clone(),
            user_id: task.user_id.clone(),
            label,
            raw_output: raw,
            parse_status: ParseStatus::Clean,
        }
    }

    /// Predicts every evaluated (non-train) task and scores the result. Task
    /// failures are recorded, not raised.
    pub fn run_method(&self, method: &MethodConfig, tasks: &[QueryTask]) -> Result<MethodRun> {
        method.validate()?;
        let comp = method.effective_composition();
        let evaluated: Vec<&QueryTask> = tasks.iter().filter(|t| !t.is_train()).collect();
        let mut notes = Vec::new();

        let results: Vec<Result<Prediction>> = match method.name {
            MethodName::Random => evaluated
                .iter()
                .map(|t| Ok(self.fixed(method, t, random_label(method.seed, t))))
                .collect(),
            MethodName::Majority => {
                let train: Vec<&QueryTask> = tasks.iter().filter(|t| t.is_train()).collect();
                let source = if train.iter().any(|t| t.gold.is_some()) {
                    train
                } else {
                    let caveat = "no training split; majority taken from the evaluated split";
                    self.gateway.journal().warn("eval/majority", caveat);
                    notes.push(caveat.to_string());
                    evaluated.clone()
                };
                let majority = majority_labels(&source);
                evaluated
                    .iter()
                    .map(|t| {
                        let label = majority
                            .get(&t.kind)
                            .copied()
                            .unwrap_or_else(|| Label::fallback(t.kind));
                        Ok(self.fixed(method, t, label))
                    })
                    .collect()
            }
            _ => map_bounded(&evaluated, self.max_parallel, |t| {
                self.predict_one(method, &comp, t)
            }),
        };

        let mut predictions = Vec::new();
        let mut failures = Vec::new();
        for (t, r) in evaluated.iter().zip(results) {
            match r {
                Ok(p) => predictions.push(p),
                Err(e) => {
                    self.gateway
                        .journal()
                        .warn(format!("eval/{}/{}", method.name, t.task_id), e.to_string());
                    failures.push(TaskFailure {
                        task_id: t.task_id.clone(),
                        kind: e.kind().into(),
                        error: e.to_string(),
                    });
                }
            }
        }
        let mut report = evaluate(&evaluated, &predictions);
        if !failures.is_empty() {
            report.notes.push(format!("{} task(s) failed", failures.len()));
        }
        report.notes.extend(notes);
        Ok(MethodRun {
            method: method.name,
            predictions,
            failures,
            report,
        })
    }
}

/// Uniform random label, seeded per (seed, task).
pub fn random_label(seed: u64, task: &QueryTask) -> Label {
    let h = sha256_hex(format!("{seed}:{}", task.task_id).as_bytes());
    let s = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    match task.kind {
        TaskKind::ResponseForecast => {
            Label::forecast(rng.gen_range(0..4), Polarity::ALL[rng.gen_range(0..3)])
        }
        TaskKind::OpinionChoice => Label::choice(rng.gen_range(0..task.options.len().max(1))),
    }
}

/// Most frequent gold value per task kind and dimension; ties go to the smallest.
pub fn majority_labels(tasks: &[&QueryTask]) -> BTreeMap<TaskKind, Label> {
    fn mode<T: Ord + Copy>(v: impl Iterator<Item = T>) -> Option<T> {
        let mut counts: BTreeMap<T, usize> = BTreeMap::new();
        for x in v {
            *counts.entry(x).or_default() += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|(_, c)| *c == best).map(|(k, _)| k)
    }
    let mut out = BTreeMap::new();
    for kind in [TaskKind::ResponseForecast, TaskKind::OpinionChoice] {
        let golds: Vec<Label> = tasks
            .iter()
            .filter(|t| t.kind == kind)
            .filter_map(|t| t.gold)
            .collect();
        if golds.is_empty() {
            continue;
        }
        let label = match kind {
            TaskKind::ResponseForecast => Label::forecast(
                mode(golds.iter().filter_map(|g| g.intensity)).unwrap_or(0),
                mode(golds.iter().filter_map(|g| g.polarity)).unwrap_or(Polarity::Neutral),
            ),
            TaskKind::OpinionChoice => {
                Label::choice(mode(golds.iter().filter_map(|g| g.choice_index)).unwrap_or(0))
            }
        };
        out.insert(kind, label);
    }
    out
}
