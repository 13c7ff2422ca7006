//! Personalized prediction: prompt assembly, analyzer call and label parsing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::gateway::{AnalyzerRequest, Gateway, JournalEvent};
use crate::retrieve::{RetrievalItem, RetrievalSet, Source};
use crate::store::read_jsonl;
use crate::template::TemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ResponseForecast,
    OpinionChoice,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ResponseForecast => "response_forecast",
            TaskKind::OpinionChoice => "opinion_choice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" => Some(Polarity::Positive),
            "negative" => Some(Polarity::Negative),
            "neutral" => Some(Polarity::Neutral),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Label {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_index: Option<usize>,
}

impl Label {
    pub fn forecast(intensity: u8, polarity: Polarity) -> Self {
        Self {
            intensity: Some(intensity),
            polarity: Some(polarity),
            choice_index: None,
        }
    }

    pub fn choice(index: usize) -> Self {
        Self {
            choice_index: Some(index),
            ..Self::default()
        }
    }

    /// The label used when nothing can be parsed.
    pub fn fallback(kind: TaskKind) -> Self {
        match kind {
            TaskKind::ResponseForecast => Self::forecast(0, Polarity::Neutral),
            TaskKind::OpinionChoice => Self::choice(0),
        }
    }

    pub fn validate(&self, kind: TaskKind, n_options: usize) -> Result<()> {
        let ok = match kind {
            TaskKind::ResponseForecast => {
                matches!(self.intensity, Some(0..=3))
                    && self.polarity.is_some()
                    && self.choice_index.is_none()
            }
            TaskKind::OpinionChoice => {
                matches!(self.choice_index, Some(i) if i < n_options)
                    && self.intensity.is_none()
                    && self.polarity.is_none()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::MalformedRecord(format!(
                "label {self:?} does not fit a {} task with {n_options} options",
                kind.as_str()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTask {
    pub task_id: String,
    pub user_id: String,
    pub kind: TaskKind,
    pub stimulus: String,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    /// `train` or `test`; absent means evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl QueryTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::MalformedRecord(format!("task {}: {m}", self.task_id)));
        if self.task_id.is_empty() || self.user_id.is_empty() {
            return bad("task_id and user_id must be non-empty");
        }
        match self.kind {
            TaskKind::ResponseForecast if !self.options.is_empty() => {
                return bad("response_forecast tasks take no options")
            }
            TaskKind::OpinionChoice if self.options.len() < 2 => {
                return bad("opinion_choice tasks need at least two options")
            }
            _ => {}
        }
        if let Some(g) = &self.gold {
            g.validate(self.kind, self.options.len())?;
        }
        Ok(())
    }

    pub fn is_train(&self) -> bool {
        self.split.as_deref() == Some("train")
    }
}

pub fn load_tasks(path: &Path) -> Result<Vec<QueryTask>> {
    let tasks: Vec<QueryTask> = read_jsonl(path)?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

/// One JSON object per line, in the given order.
pub fn jsonl_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Repaired,
    Defaulted,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Clean => "clean",
            ParseStatus::Repaired => "repaired",
            ParseStatus::Defaulted => "defaulted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub user_id: String,
    pub label: Label,
    pub raw_output: String,
    pub parse_status: ParseStatus,
}

static INTENSITY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*intensity\s*:\s*([0-3])\s*$").unwrap());
static POLARITY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*polarity\s*:\s*(positive|negative|neutral)\s*$").unwrap());
static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^\s*answer\s*:\s*([A-Z]|\d+)\s*\.?\s*$").unwrap());
static LOOSE_DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([0-3])\b").unwrap());
static LOOSE_POLARITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(positive|negative|neutral)\b").unwrap());
static LOOSE_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Z])\b").unwrap());

/// Letters name options up to 26; past that options are numbered from 0.
fn uses_letters(n_options: usize) -> bool {
    n_options <= 26
}

fn option_marker(i: usize, n_options: usize) -> String {
    if uses_letters(n_options) {
        char::from(b'A' + i as u8).to_string()
    } else {
        i.to_string()
    }
}

fn parse_answer_token(tok: &str, n_options: usize) -> Option<usize> {
    let i = match tok.parse::<usize>() {
        Ok(i) => i,
        Err(_) => {
            let c = tok.chars().next()?.to_ascii_uppercase();
            (c as u8).checked_sub(b'A')? as usize
        }
    };
    (i < n_options).then_some(i)
}

/// Parses analyzer output into a label. Always returns a valid label.
pub fn parse_prediction(raw: &str, kind: TaskKind, options: &[String]) -> (Label, ParseStatus) {
    match kind {
        TaskKind::ResponseForecast => {
            let strict = INTENSITY_LINE
                .captures(raw)
                .zip(POLARITY_LINE.captures(raw))
                .map(|(i, p)| Label::forecast(i[1].parse().unwrap(), Polarity::parse(&p[1]).unwrap()));
            if let Some(l) = strict {
                return (l, ParseStatus::Clean);
            }
            let loose = LOOSE_DIGIT
                .captures(raw)
                .zip(LOOSE_POLARITY.captures(raw))
                .map(|(i, p)| Label::forecast(i[1].parse().unwrap(), Polarity::parse(&p[1]).unwrap()));
            match loose {
                Some(l) => (l, ParseStatus::Repaired),
                None => (Label::fallback(kind), ParseStatus::Defaulted),
            }
        }
        TaskKind::OpinionChoice => {
            let n = options.len();
            if let Some(i) = ANSWER_LINE
                .captures(raw)
                .and_then(|c| parse_answer_token(&c[1], n))
            {
                return (Label::choice(i), ParseStatus::Clean);
            }
            if uses_letters(n) {
                for c in LOOSE_LETTER.captures_iter(raw) {
                    if let Some(i) = parse_answer_token(&c[1], n) {
                        return (Label::choice(i), ParseStatus::Repaired);
                    }
                }
            }
            let lower = raw.to_lowercase();
            if let Some(i) = options
                .iter()
                .position(|o| !o.is_empty() && lower.contains(&o.to_lowercase()))
            {
                return (Label::choice(i), ParseStatus::Repaired);
            }
            (Label::fallback(kind), ParseStatus::Defaulted)
        }
    }
}

/// Renders a label in the strict answer grammar.
pub fn format_label(label: &Label, n_options: usize) -> String {
    match label.choice_index {
        Some(i) => format!("Answer: {}", option_marker(i, n_options)),
        None => format!(
            "Intensity: {}\nPolarity: {}",
            label.intensity.unwrap_or(0),
            label.polarity.unwrap_or(Polarity::Neutral)
        ),
    }
}

fn options_block(task: &QueryTask) -> String {
    if task.options.is_empty() {
        return String::new();
    }
    let n = task.options.len();
    let mut s = String::from("Options:");
    for (i, o) in task.options.iter().enumerate() {
        s.push_str(&format!("\n{}. {o}", option_marker(i, n)));
    }
    s
}

fn answer_format(task: &QueryTask) -> String {
    match task.kind {
        TaskKind::ResponseForecast => "Reply with exactly two lines:\nIntensity: <0, 1, 2 or 3>\nPolarity: <Positive, Negative or Neutral>".into(),
        TaskKind::OpinionChoice if uses_letters(task.options.len()) => {
            "Reply with exactly one line:\nAnswer: <option letter>".into()
        }
        TaskKind::OpinionChoice => "Reply with exactly one line:\nAnswer: <option number>".into(),
    }
}

const NONE_BLOCK: &str = "(none)";

fn block<'a>(items: impl Iterator<Item = &'a RetrievalItem>) -> String {
    let lines: Vec<String> = items.map(|i| format!("- {}", i.text)).collect();
    if lines.is_empty() {
        NONE_BLOCK.into()
    } else {
        lines.join("\n")
    }
}

/// What the prediction prompt is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    Retrieved(RetrievalSet),
    /// Free text placed in the self block.
    Summary(String),
}

impl Context {
    pub fn digest(&self) -> String {
        match self {
            Context::Retrieved(r) => json_digest(r),
            Context::Summary(s) => sha256_hex(s.as_bytes()),
        }
    }
}

/// Builds prediction prompts from templates under an optional character budget.
#[derive(Debug, Clone)]
pub struct Assembler<'a> {
    pub templates: &'a TemplateSet,
    /// Maximum characters across the evidence blocks.
    pub char_budget: Option<usize>,
}

impl<'a> Assembler<'a> {
    pub fn new(templates: &'a TemplateSet) -> Self {
        Self {
            templates,
            char_budget: None,
        }
    }

    pub fn with_budget(mut self, budget: Option<usize>) -> Self {
        self.char_budget = budget;
        self
    }

    /// Drops the lowest-scoring items until the blocks fit the budget. Returns
    /// the kept items and the number dropped.
    fn fit<'r>(&self, items: &'r [RetrievalItem]) -> (Vec<&'r RetrievalItem>, usize) {
        let Some(budget) = self.char_budget else {
            return (items.iter().collect(), 0);
        };
        let cost = |i: &RetrievalItem| i.text.chars().count() + 3;
        let mut total: usize = items.iter().map(cost).sum();
        let mut order: Vec<usize> = (0..items.len()).collect();
        // lowest score first; among equals, later items go first
        order.sort_by(|&a, &b| {
            let sa = items[a].score.unwrap_or(f64::NEG_INFINITY);
            let sb = items[b].score.unwrap_or(f64::NEG_INFINITY);
            sa.total_cmp(&sb).then(b.cmp(&a))
        });
        let mut dropped = vec![false; items.len()];
        let mut n = 0;
        for i in order {
            if total <= budget {
                break;
            }
            dropped[i] = true;
            total -= cost(&items[i]);
            n += 1;
        }
        let kept = items
            .iter()
            .zip(dropped)
            .filter(|(_, d)| !d)
            .map(|(i, _)| i)
            .collect();
        (kept, n)
    }

    pub fn assemble(
        &self,
        task: &QueryTask,
        context: &Context,
        template: &str,
        gateway: Option<&Gateway>,
    ) -> Result<String> {
        let (self_block, collab_block) = match context {
            Context::Retrieved(rset) => {
                let (kept, dropped) = self.fit(&rset.items);
                if dropped > 0 {
                    if let Some(gw) = gateway {
                        gw.journal().note(
                            format!("infer/budget/{}", task.task_id),
                            format!("dropped {dropped} lowest-scoring item(s) to fit the character budget"),
                        );
                    }
                }
                (
                    block(kept.iter().copied().filter(|i| i.source == Source::Own)),
                    block(kept.iter().copied().filter(|i| i.source == Source::Collaborative)),
                )
            }
            Context::Summary(s) => {
                let text = match self.char_budget {
                    Some(b) if s.chars().count() > b => s.chars().take(b).collect(),
                    _ => s.clone(),
                };
                (text, NONE_BLOCK.to_string())
            }
        };
        let vars = BTreeMap::from([
            ("stimulus", task.stimulus.clone()),
            ("self_block", self_block),
            ("collab_block", collab_block),
            ("options", options_block(task)),
            ("answer_format", answer_format(task)),
        ]);
        self.templates.render(template, &vars)
    }
}

/// Runs one prediction: assemble, analyze, parse, journal.
pub fn predict(
    gateway: &Gateway,
    assembler: &Assembler<'_>,
    task: &QueryTask,
    context: &Context,
    template: &str,
    method: &str,
) -> Result<Prediction> {
    let prompt = assembler.assemble(task, context, template, Some(gateway))?;
    let req = AnalyzerRequest::new(template, prompt.clone()).with_task(task.task_id.clone());
    let raw = gateway.analyze(&req)?;
    Ok(finish(gateway, task, context, &prompt, method, raw))
}

/// Parses `raw` for `task` and journals the prediction.
pub fn finish(
    gateway: &Gateway,
    task: &QueryTask,
    context: &Context,
    prompt: &str,
    method: &str,
    raw: String,
) -> Prediction {
    let (label, status) = parse_prediction(&raw, task.kind, &task.options);
    if status == ParseStatus::Defaulted {
        gateway.journal().warn(
            format!("infer/parse/{}", task.task_id),
            "unparseable output; label defaulted",
        );
    }
    gateway.journal().record(JournalEvent::Prediction {
        task_id: task.task_id.clone(),
        user_id: task.user_id.clone(),
        method: method.to_string(),
        retrieval_digest: context.digest(),
        prompt_digest: sha256_hex(prompt.as_bytes()),
        raw_output: raw.clone(),
        parse_status: status.as_str().into(),
    });
    Prediction {
        task_id: task.task_id.clone(),
        user_id: task.user_id.clone(),
        label,
        raw_output: raw,
        parse_status: status,
    }
}
