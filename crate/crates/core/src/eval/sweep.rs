use serde::{Deserialize, Serialize};

use super::methods::{MethodConfig, Runner};
use crate::error::Result;
use crate::infer::QueryTask;

pub const CSV_HEADER: &str = "r,x,pearson,accuracy,n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub r: usize,
    pub x: f64,
    pub pearson: Option<f64>,
    pub accuracy: Option<f64>,
    pub n: usize,
    /// Why a metric is missing, if one is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    Pearson,
    Accuracy,
}

impl SweepCell {
    pub fn metric(&self, m: SweepMetric) -> Option<f64> {
        match m {
            SweepMetric::Pearson => self.pearson,
            SweepMetric::Accuracy => self.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

/// `0, step, 2·step, ..., 1` with each value snapped to 1e-9.
pub fn x_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n)
        .map(|i| ((i as f64 * step).min(1.0) * 1e9).round() / 1e9)
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl SweepResult {
    pub fn cell(&self, r: usize, x: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.r == r && (c.x - x).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.r,
                c.x,
                fmt_opt(c.pearson),
                fmt_opt(c.accuracy),
                c.n
            ));
        }
        out
    }

    /// Cells with a missing metric, as JSON for the sidecar file.
    pub fn failures_json(&self) -> Result<String> {
        let failed: Vec<&SweepCell> = self.cells.iter().filter(|c| c.reason.is_some()).collect();
        Ok(serde_json::to_string_pretty(&failed)?)
    }

    /// The `x` maximizing `metric` at `r`; ties go to the smallest `x`.
    pub fn argmax_x(&self, r: usize, metric: SweepMetric) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for c in self.cells.iter().filter(|c| c.r == r) {
            let Some(p) = c.metric(metric) else { continue };
            best = match best {
                Some((bx, bp)) if bp > p || (bp == p && bx <= c.x) => Some((bx, bp)),
                _ => Some((c.x, p)),
            };
        }
        best.map(|(x, _)| x)
    }
}

/// Runs `base` over the `r × x` grid. A failing cell is left empty and the
/// sweep continues.
pub fn sweep(
    runner: &Runner<'_>,
    base: &MethodConfig,
    r_values: &[usize],
    x_values: &[f64],
    tasks: &[QueryTask],
) -> SweepResult {
    let mut result = SweepResult::default();
    for &r in r_values {
        for &x in x_values {
            let mut cfg = base.clone();
            cfg.composition.r = r;
            cfg.composition.x = x;
            let cell = match runner.run_method(&cfg, tasks) {
                Ok(run) => {
                    let reason = if run.report.pearson.is_none() || run.report.accuracy.is_none() {
                        Some(if let Some(f) = run.failures.first().filter(|_| run.report.n == 0) {
                            format!("{}: {}", f.kind, f.error)
                        } else if run.report.notes.is_empty() {
                            "metric undefined".to_string()
                        } else {
                            run.report.notes.join("; ")
                        })
                    } else {
                        None
                    };
                    SweepCell {
                        r,
                        x,
                        pearson: run.report.pearson,
                        accuracy: run.report.accuracy,
                        n: run.report.n,
                        reason,
                    }
                }
                Err(e) => SweepCell {
                    r,
                    x,
                    pearson: None,
                    accuracy: None,
                    n: 0,
                    reason: Some(e.to_string()),
                },
            };
            if let Some(reason) = &cell.reason {
                runner
                    .gateway()
                    .journal()
                    .warn(format!("sweep/r={r}/x={x}"), reason.clone());
            }
            result.cells.push(cell);
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(r: usize, x: f64, p: Option<f64>) -> SweepCell {
        SweepCell {
            r,
            x,
            pearson: p,
            accuracy: p,
            n: 3,
            reason: p.is_none().then(|| "constant series".into()),
        }
    }

    #[test]
    fn grid_is_exact() {
        let g = x_grid(0.05);
        assert_eq!(g.len(), 21);
        assert_eq!(g[5], 0.25);
        assert_eq!(g[20], 1.0);
        assert_eq!(g[3], 0.15);
    }

    #[test]
    fn csv_and_argmax() {
        let s = SweepResult {
            cells: vec![
                cell(8, 0.0, Some(0.1)),
                cell(8, 0.25, Some(0.5)),
                cell(8, 0.5, Some(0.5)),
                cell(8, 0.75, None),
            ],
        };
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "r,x,pearson,accuracy,n");
        assert_eq!(lines[2], "8,0.25,0.500000,0.500000,3");
        assert_eq!(lines[4], "8,0.75,,,3");
        assert_eq!(s.argmax_x(8, SweepMetric::Pearson), Some(0.25));
        assert_eq!(s.argmax_x(8, SweepMetric::Accuracy), Some(0.25));
        assert_eq!(s.argmax_x(9, SweepMetric::Pearson), None);
        assert!(s.failures_json().unwrap().contains("constant series"));
    }
}
