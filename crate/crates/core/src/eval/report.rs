use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, alignment_and_mse, micro_macro_f1, pearson, spearman};
use crate::error::{Error, Result};
use crate::infer::{ParseStatus, Prediction, QueryTask, TaskKind};

/// Scores of one method over one task set. Fractions are in `[0, 1]`; undefined
/// values are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub alignment_w1: Option<f64>,
    pub mse: Option<f64>,
    /// Scored predictions.
    pub n: usize,
    pub defaulted_rate: f64,
    /// Evaluated tasks with no gold label or no prediction.
    pub excluded: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn class_of(kind: TaskKind, l: &crate::infer::Label) -> String {
    match kind {
        TaskKind::ResponseForecast => format!("{:?}", l.polarity),
        TaskKind::OpinionChoice => format!("choice:{:?}", l.choice_index),
    }
}

fn defined(r: Result<f64>, what: &str, notes: &mut Vec<String>) -> Option<f64> {
    match r {
        Ok(v) => Some(v),
        Err(Error::DegenerateSeries(why)) => {
            notes.push(format!("{what} undefined: {why}"));
            None
        }
        Err(_) => None,
    }
}

/// Scores `preds` against the gold labels of `tasks`.
///
/// Correlations and the ordinal metrics use intensity on response-forecast tasks;
/// F1 uses polarity there and the chosen option on opinion tasks; accuracy is an
/// exact match on the whole label.
pub fn evaluate(tasks: &[&QueryTask], preds: &[Prediction]) -> EvalReport {
    let by_id: BTreeMap<&str, &Prediction> = preds.iter().map(|p| (p.task_id.as_str(), p)).collect();
    let mut report = EvalReport::default();
    let (mut pi, mut gi) = (Vec::new(), Vec::new());
    let (mut pc, mut gc) = (Vec::new(), Vec::new());
    let (mut pl, mut gl) = (Vec::new(), Vec::new());
    let mut defaulted = 0;
    for t in tasks {
        let (Some(gold), Some(p)) = (t.gold.as_ref(), by_id.get(t.task_id.as_str())) else {
            report.excluded += 1;
            continue;
        };
        if p.parse_status == ParseStatus::Defaulted {
            defaulted += 1;
        }
        pl.push(p.label);
        gl.push(*gold);
        pc.push(class_of(t.kind, &p.label));
        gc.push(class_of(t.kind, gold));
        if t.kind == TaskKind::ResponseForecast {
            pi.push(p.label.intensity.unwrap_or(0));
            gi.push(gold.intensity.unwrap_or(0));
        }
    }
    report.n = pl.len();
    if report.excluded > 0 {
        report.notes.push(format!("{} task(s) excluded", report.excluded));
    }
    if report.n == 0 {
        report.notes.push("no scored predictions".into());
        return report;
    }
    report.defaulted_rate = defaulted as f64 / report.n as f64;
    report.accuracy = accuracy(&pl, &gl).ok();
    if let Ok((mi, ma)) = micro_macro_f1(&pc, &gc) {
        report.micro_f1 = Some(mi);
        report.macro_f1 = Some(ma);
    }
    if !pi.is_empty() {
        let xf: Vec<f64> = pi.iter().map(|v| f64::from(*v)).collect();
        let yf: Vec<f64> = gi.iter().map(|v| f64::from(*v)).collect();
        report.pearson = defined(pearson(&xf, &yf), "pearson", &mut report.notes);
        report.spearman = defined(spearman(&xf, &yf), "spearman", &mut report.notes);
        if let Ok((a, m)) = alignment_and_mse(&pi, &gi) {
            report.alignment_w1 = Some(a);
            report.mse = Some(m);
        }
    }
    report
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}", v * 100.0)).unwrap_or_else(|| "-".into())
}

/// Aligned text table, percentages ×100 with two decimals; MSE is printed raw.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let header = ["method", "r_s", "r", "MiF1", "MaF1", "Acc", "Align", "MSE", "n", "dflt%"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (name, r) in rows {
        cells.push(vec![
            name.clone(),
            pct(r.spearman),
            pct(r.pearson),
            pct(r.micro_f1),
            pct(r.macro_f1),
            pct(r.accuracy),
            pct(r.alignment_w1),
            r.mse.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            r.n.to_string(),
            format!("{:.2}", r.defaulted_rate * 100.0),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
