use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::infer::{Prediction, QueryTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Lurker,
    Regular,
    Frequent,
}

/// History-length thresholds: `len <= lurker_max` is a lurker, `len >= frequent_min`
/// is frequent, everything between is regular.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortThresholds {
    pub lurker_max: usize,
    pub frequent_min: usize,
}

impl Default for CohortThresholds {
    fn default() -> Self {
        Self {
            lurker_max: 5,
            frequent_min: 50,
        }
    }
}

impl CohortThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.frequent_min <= self.lurker_max {
            return Err(Error::ConfigError(format!(
                "cohorts.frequent_min ({}) must exceed cohorts.lurker_max ({})",
                self.frequent_min, self.lurker_max
            )));
        }
        Ok(())
    }

    pub fn classify(&self, history_len: usize) -> Cohort {
        if history_len <= self.lurker_max {
            Cohort::Lurker
        } else if history_len >= self.frequent_min {
            Cohort::Frequent
        } else {
            Cohort::Regular
        }
    }
}

/// Partitions users by history length.
pub fn slice(
    history_lens: &BTreeMap<String, usize>,
    t: &CohortThresholds,
) -> Result<BTreeMap<Cohort, BTreeSet<String>>> {
    t.validate()?;
    let mut out: BTreeMap<Cohort, BTreeSet<String>> = BTreeMap::new();
    for (u, &n) in history_lens {
        out.entry(t.classify(n)).or_default().insert(u.clone());
    }
    Ok(out)
}

fn ordered(history_lens: &BTreeMap<String, usize>, longest: bool) -> Vec<(&String, usize)> {
    let mut v: Vec<(&String, usize)> = history_lens.iter().map(|(u, n)| (u, *n)).collect();
    if longest {
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    } else {
        v.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    }
    v
}

/// The `n` users with the shortest histories; ties by user id.
pub fn sparsest(history_lens: &BTreeMap<String, usize>, n: usize) -> BTreeSet<String> {
    ordered(history_lens, false).into_iter().take(n).map(|(u, _)| u.clone()).collect()
}

/// The `n` users with the longest histories; ties by user id.
pub fn longest(history_lens: &BTreeMap<String, usize>, n: usize) -> BTreeSet<String> {
    ordered(history_lens, true).into_iter().take(n).map(|(u, _)| u.clone()).collect()
}

/// Scores only the tasks of `users`.
pub fn cohort_report(tasks: &[&QueryTask], preds: &[Prediction], users: &BTreeSet<String>) -> EvalReport {
    let sub: Vec<&QueryTask> = tasks.iter().copied().filter(|t| users.contains(&t.user_id)).collect();
    evaluate(&sub, preds)
}

/// One report per non-empty cohort.
pub fn cohort_reports(
    tasks: &[&QueryTask],
    preds: &[Prediction],
    cohorts: &BTreeMap<Cohort, BTreeSet<String>>,
) -> BTreeMap<Cohort, EvalReport> {
    cohorts
        .iter()
        .map(|(c, users)| (*c, cohort_report(tasks, preds, users)))
        .collect()
}
