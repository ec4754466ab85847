//! Class-wise balanced accuracy and seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::sampling::Scenario;

/// Per-class recall and their mean over the classes present in `y_true`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedAccuracy {
    pub aca: f64,
    /// `None` for classes absent from `y_true`.
    pub per_class_recall: Vec<Option<f64>>,
}

impl BalancedAccuracy {
    pub fn absent_classes(&self) -> Vec<usize> {
        self.per_class_recall
            .iter()
            .enumerate()
            .filter_map(|(c, r)| r.is_none().then_some(c))
            .collect()
    }
}

pub fn balanced_accuracy(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<BalancedAccuracy> {
    if y_true.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    let mut counts = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange { label, num_classes });
            }
        }
        counts[t] += 1;
        if t == p {
            correct[t] += 1;
        }
    }
    let per_class_recall: Vec<Option<f64>> = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &k)| (n > 0).then(|| k as f64 / n as f64))
        .collect();
    let mut present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    present.sort_by(f64::total_cmp);
    let aca = present.iter().sum::<f64>() / present.len() as f64;
    Ok(BalancedAccuracy {
        aca,
        per_class_recall,
    })
}

/// One fitted-and-evaluated sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub method: String,
    pub scenario: Scenario,
    pub k: usize,
    /// Repetition index within the cell's seed budget.
    pub repetition: usize,
    /// Derived sampling seed.
    pub seed: u64,
    /// Zero for failed runs.
    pub aca: f64,
    pub fit_seconds: f64,
    pub per_class_recall: Vec<Option<f64>>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            task: self.task.clone(),
            scenario: self.scenario,
            k: self.k,
            repetition: self.repetition,
            method: self.method.clone(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Identity of a record within a sweep.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub task: String,
    pub scenario: Scenario,
    pub k: usize,
    pub repetition: usize,
    pub method: String,
}

/// Fields records can be grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Task,
    Method,
    Scenario,
    K,
}

/// Group coordinates; fields not grouped on are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub task: Option<String>,
    pub method: Option<String>,
    pub scenario: Option<Scenario>,
    pub k: Option<usize>,
}

impl GroupId {
    fn of(record: &RunRecord, keys: &[GroupKey]) -> Self {
        let mut id = GroupId::default();
        for key in keys {
            match key {
                GroupKey::Task => id.task = Some(record.task.clone()),
                GroupKey::Method => id.method = Some(record.method.clone()),
                GroupKey::Scenario => id.scenario = Some(record.scenario),
                GroupKey::K => id.k = Some(record.k),
            }
        }
        id
    }
}

/// Confidence-interval construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CiMethod {
    #[default]
    Normal,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(flatten)]
    pub group: GroupId,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single record.
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean, sample standard deviation and 95% interval of a sample.
///
/// Values are sorted before summation, so the result does not depend on the
/// input order.
pub fn summarize(values: &[f64], ci: CiMethod) -> (f64, f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    if sorted.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    }
    if sorted.first() == sorted.last() {
        let v = sorted[0];
        return (v, 0.0, v, v);
    }
    let mean = sorted.iter().sum::<f64>() / n;
    let std = if sorted.len() > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let z = match ci {
        CiMethod::Normal => 1.959_963_984_540_054,
        CiMethod::StudentT if sorted.len() > 1 => StudentsT::new(0.0, 1.0, n - 1.0)
            .map(|t| t.inverse_cdf(0.975))
            .unwrap_or(f64::NAN),
        CiMethod::StudentT => 0.0,
    };
    let half = z * std / n.sqrt();
    (mean, std, mean - half, mean + half)
}

/// Aggregates successful records by the given keys.
pub fn aggregate(records: &[RunRecord], keys: &[GroupKey], ci: CiMethod) -> Result<Vec<Aggregate>> {
    let mut groups: BTreeMap<GroupId, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        groups.entry(GroupId::of(r, keys)).or_default().push(r.aca);
    }
    if groups.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok(groups
        .into_iter()
        .map(|(group, values)| {
            let (mean, std, ci_low, ci_high) = summarize(&values, ci);
            Aggregate {
                group,
                n: values.len(),
                mean,
                std,
                ci_low,
                ci_high,
            }
        })
        .collect())
}

/// Records plus their per-(task, method, scenario, K) aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

pub const DEFAULT_GROUPING: [GroupKey; 4] =
    [GroupKey::Task, GroupKey::Method, GroupKey::Scenario, GroupKey::K];

impl EvalReport {
    /// Sorts the records by key and aggregates them.
    pub fn from_records(mut records: Vec<RunRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyReport);
        }
        records.sort_by_key(RunRecord::key);
        let aggregates = aggregate(&records, &DEFAULT_GROUPING, CiMethod::Normal)?;
        Ok(Self {
            records,
            aggregates,
        })
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn mean_aca(&self, task: &str, method: &str, scenario: Scenario, k: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| {
                a.group.task.as_deref() == Some(task)
                    && a.group.method.as_deref() == Some(method)
                    && a.group.scenario == Some(scenario)
                    && a.group.k == Some(k)
            })
            .map(|a| a.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDrop {
    pub task: String,
    pub k: usize,
    pub delta: f64,
}

/// `mean_aca(to) − mean_aca(from)` for every (task, K) of a method.
pub fn scenario_drop(
    report: &EvalReport,
    method: &str,
    from: Scenario,
    to: Scenario,
) -> Result<Vec<ScenarioDrop>> {
    let mut cells: BTreeMap<(String, usize), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for a in &report.aggregates {
        if a.group.method.as_deref() != Some(method) {
            continue;
        }
        let (Some(task), Some(k), Some(s)) = (&a.group.task, a.group.k, a.group.scenario) else {
            continue;
        };
        let cell = cells.entry((task.clone(), k)).or_default();
        if s == from {
            cell.0 = Some(a.mean);
        }
        if s == to {
            cell.1 = Some(a.mean);
        }
    }
    let mut out = Vec::new();
    for ((task, k), (a, b)) in cells {
        match (a, b) {
            (Some(a), Some(b)) => out.push(ScenarioDrop { task, k, delta: b - a }),
            (None, Some(_)) => {
                return Err(Error::MissingScenario { task, k, scenario: from.to_string() })
            }
            (_, None) => return Err(Error::MissingScenario { task, k, scenario: to.to_string() }),
        }
    }
    if out.is_empty() {
        return Err(Error::MissingScenario {
            task: "*".into(),
            k: 0,
            scenario: from.to_string(),
        });
    }
    Ok(out)
}
