//! Report files: aggregates as CSV and JSON, grouped markdown tables and a
//! per-(K, scenario) curve CSV.
//!
//! Everything written here is a pure function of the records (fit timings go
//! to their own file), so reruns with the same seed reproduce the files byte
//! for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::METHOD_NAMES;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, scenario_drop, Aggregate, CiMethod, EvalReport, GroupId, GroupKey, ScenarioDrop};
use crate::sampling::Scenario;

pub const AGGREGATES_CSV: &str = "aggregates.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const CURVES_CSV: &str = "curves.csv";
pub const RECORDS_CSV: &str = "records.csv";
pub const TIMINGS_CSV: &str = "timings.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::InvalidConfig(format!("unknown report format `{other}`"))),
        }
    }
}

/// Canonical method order: known method names first in their fixed order,
/// then any other adapter names alphabetically.
pub fn method_order(a: &str, b: &str) -> std::cmp::Ordering {
    let rank = |m: &str| METHOD_NAMES.iter().position(|&n| n == m).unwrap_or(METHOD_NAMES.len());
    (rank(a), a).cmp(&(rank(b), b))
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Results(e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateRow {
    task: String,
    method: String,
    scenario: Scenario,
    k: usize,
    n: usize,
    mean: f64,
    std: f64,
    ci_low: f64,
    ci_high: f64,
}

impl AggregateRow {
    fn from_aggregate(a: &Aggregate) -> Result<Self> {
        let g = &a.group;
        let missing = || Error::Results("aggregate is not grouped by task, method, scenario and K".into());
        Ok(Self {
            task: g.task.clone().ok_or_else(missing)?,
            method: g.method.clone().ok_or_else(missing)?,
            scenario: g.scenario.ok_or_else(missing)?,
            k: g.k.ok_or_else(missing)?,
            n: a.n,
            mean: a.mean,
            std: a.std,
            ci_low: a.ci_low,
            ci_high: a.ci_high,
        })
    }

    fn into_aggregate(self) -> Aggregate {
        Aggregate {
            group: GroupId {
                task: Some(self.task),
                method: Some(self.method),
                scenario: Some(self.scenario),
                k: Some(self.k),
            },
            n: self.n,
            mean: self.mean,
            std: self.std,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
        }
    }
}

pub fn aggregates_to_csv(aggregates: &[Aggregate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for a in aggregates {
        w.serialize(AggregateRow::from_aggregate(a)?).map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
}

pub fn aggregates_from_csv(text: &str) -> Result<Vec<Aggregate>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<AggregateRow>()
        .map(|r| r.map(AggregateRow::into_aggregate).map_err(csv_error))
        .collect()
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub runs: usize,
    pub failed: usize,
    pub aggregates: Vec<Aggregate>,
    /// Per method, `standard → relaxed` and `standard → realistic` drops.
    pub scenario_drops: BTreeMap<String, BTreeMap<String, Vec<ScenarioDrop>>>,
}

pub fn json_report(report: &EvalReport) -> JsonReport {
    let methods: BTreeSet<&str> = report.records.iter().map(|r| r.method.as_str()).collect();
    let mut scenario_drops = BTreeMap::new();
    for m in methods {
        let mut per = BTreeMap::new();
        for to in [Scenario::Relaxed, Scenario::Realistic] {
            if let Ok(d) = scenario_drop(report, m, Scenario::Standard, to) {
                per.insert(format!("standard_to_{to}"), d);
            }
        }
        if !per.is_empty() {
            scenario_drops.insert(m.to_string(), per);
        }
    }
    JsonReport {
        runs: report.records.len(),
        failed: report.failed(),
        aggregates: report.aggregates.clone(),
        scenario_drops,
    }
}

pub fn report_to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(&json_report(report)).map_err(|e| Error::Results(e.to_string()))
}

pub fn aggregates_from_json(text: &str) -> Result<Vec<Aggregate>> {
    serde_json::from_str::<JsonReport>(text)
        .map(|r| r.aggregates)
        .map_err(|e| Error::Results(e.to_string()))
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// One table per K: a row per method, and for each scenario a column per
/// task plus their average, ACA ×100.
pub fn render_markdown(report: &EvalReport) -> Result<String> {
    if report.records.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut cells: BTreeMap<(usize, Scenario, &str, &str), f64> = BTreeMap::new();
    let (mut tasks, mut methods, mut scenarios, mut ks) =
        (BTreeSet::new(), Vec::<&str>::new(), BTreeSet::new(), BTreeSet::new());
    for a in &report.aggregates {
        let g = &a.group;
        let (Some(t), Some(m), Some(s), Some(k)) = (g.task.as_deref(), g.method.as_deref(), g.scenario, g.k)
        else {
            continue;
        };
        cells.insert((k, s, m, t), a.mean);
        tasks.insert(t);
        if !methods.contains(&m) {
            methods.push(m);
        }
        scenarios.insert(s);
        ks.insert(k);
    }
    methods.sort_by(|a, b| method_order(a, b));

    let mut out = String::from("# Class-wise balanced accuracy (×100)\n");
    for &k in &ks {
        write!(out, "\n## K = {k}\n\n| Method |").unwrap();
        for s in &scenarios {
            for t in &tasks {
                write!(out, " {s}: {t} |").unwrap();
            }
            write!(out, " {s}: Avg |").unwrap();
        }
        out.push_str("\n|---|");
        for _ in 0..scenarios.len() * (tasks.len() + 1) {
            out.push_str("---:|");
        }
        out.push('\n');
        for &m in &methods {
            write!(out, "| {m} |").unwrap();
            for &s in &scenarios {
                let vals: Vec<Option<f64>> = tasks.iter().map(|&t| cells.get(&(k, s, m, t)).copied()).collect();
                for v in &vals {
                    match v {
                        Some(x) => write!(out, " {} |", pct(*x)).unwrap(),
                        None => out.push_str(" – |"),
                    }
                }
                if vals.iter().all(Option::is_some) {
                    let avg = vals.iter().flatten().sum::<f64>() / vals.len() as f64;
                    write!(out, " {} |", pct(avg)).unwrap();
                } else {
                    out.push_str(" – |");
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Mean ACA and interval per (method, scenario, K) over all task runs.
pub fn render_curves(report: &EvalReport) -> Result<String> {
    let mut rows = aggregate(
        &report.records,
        &[GroupKey::Method, GroupKey::Scenario, GroupKey::K],
        CiMethod::Normal,
    )?;
    rows.sort_by(|a, b| {
        method_order(a.group.method.as_deref().unwrap_or(""), b.group.method.as_deref().unwrap_or(""))
            .then(a.group.scenario.cmp(&b.group.scenario))
            .then(a.group.k.cmp(&b.group.k))
    });
    let mut out = String::from("method,scenario,k,n,mean,ci_low,ci_high\n");
    for a in rows {
        let g = a.group;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            g.method.unwrap_or_default(),
            g.scenario.map(|s| s.to_string()).unwrap_or_default(),
            g.k.unwrap_or_default(),
            a.n,
            a.mean,
            a.ci_low,
            a.ci_high
        )
        .unwrap();
    }
    Ok(out)
}

fn records_csv(report: &EvalReport) -> String {
    let mut out = String::from("task,method,scenario,k,repetition,seed,aca,flags,error\n");
    for r in &report.records {
        let error = r.error.as_deref().unwrap_or("").replace(['"', '\n'], "'");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},\"{}\"",
            r.task,
            r.method,
            r.scenario,
            r.k,
            r.repetition,
            r.seed,
            r.aca,
            r.flags.join(";"),
            error
        )
        .unwrap();
    }
    out
}

fn timings_csv(report: &EvalReport) -> String {
    let mut out = String::from("task,method,scenario,k,repetition,fit_seconds\n");
    for r in &report.records {
        writeln!(out, "{},{},{},{},{},{}", r.task, r.method, r.scenario, r.k, r.repetition, r.fit_seconds)
            .unwrap();
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Writes one report format into `dir`.
pub fn render_report(report: &EvalReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() {
        return Err(Error::EmptyReport);
    }
    fs::create_dir_all(dir)?;
    Ok(match format {
        ReportFormat::Csv => vec![
            write(dir, AGGREGATES_CSV, &aggregates_to_csv(&report.aggregates)?)?,
            write(dir, CURVES_CSV, &render_curves(report)?)?,
        ],
        ReportFormat::Json => vec![write(dir, REPORT_JSON, &report_to_json(report)?)?],
        ReportFormat::Markdown => vec![write(dir, REPORT_MD, &render_markdown(report)?)?],
    })
}

/// Writes every report format plus the per-record and timing tables.
pub fn write_report_files(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Markdown] {
        paths.extend(render_report(report, f, dir)?);
    }
    paths.push(write(dir, RECORDS_CSV, &records_csv(report))?);
    paths.push(write(dir, TIMINGS_CSV, &timings_csv(report))?);
    Ok(paths)
}

/// The report files that depend only on the records.
pub const DETERMINISTIC_FILES: [&str; 5] = [AGGREGATES_CSV, CURVES_CSV, REPORT_JSON, REPORT_MD, RECORDS_CSV];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RunRecord;

    fn rec(task: &str, method: &str, scenario: Scenario, k: usize, rep: usize, aca: f64) -> RunRecord {
        RunRecord {
            task: task.into(),
            method: method.into(),
            scenario,
            k,
            repetition: rep,
            seed: 0,
            aca,
            fit_seconds: 0.5,
            per_class_recall: vec![],
            flags: vec![],
            error: None,
        }
    }

    fn report() -> EvalReport {
        let mut recs = Vec::new();
        for (i, t) in ["a", "b"].into_iter().enumerate() {
            for s in [Scenario::Standard, Scenario::Realistic] {
                for m in ["my_probe", "sstext_plus", "zslp"] {
                    for rep in 0..3 {
                        recs.push(rec(t, m, s, 4, rep, 0.1 * (i + rep) as f64 + 0.123456789));
                    }
                }
            }
        }
        EvalReport::from_records(recs).unwrap()
    }

    #[test]
    fn one_record_gives_one_row() {
        let r = EvalReport::from_records(vec![rec("a", "zslp", Scenario::Standard, 1, 0, 0.5)]).unwrap();
        let csv = aggregates_to_csv(&r.aggregates).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let md = render_markdown(&r).unwrap();
        assert!(md.contains("| zslp | 50.0 | 50.0 |"), "{md}");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = report();
        let csv = aggregates_to_csv(&r.aggregates).unwrap();
        assert_eq!(aggregates_from_csv(&csv).unwrap(), r.aggregates);
        let json = report_to_json(&r).unwrap();
        assert_eq!(aggregates_from_json(&json).unwrap(), r.aggregates);
    }

    #[test]
    fn markdown_has_the_grouped_shape() {
        let md = render_markdown(&report()).unwrap();
        let header = md.lines().find(|l| l.starts_with("| Method")).unwrap();
        assert_eq!(
            header,
            "| Method | standard: a | standard: b | standard: Avg | realistic: a | realistic: b | realistic: Avg |"
        );
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Method")).collect();
        assert!(rows[0].starts_with("| zslp |"));
        assert!(rows[1].starts_with("| sstext_plus |"));
        assert!(rows[2].starts_with("| my_probe |"));
        // a: mean(0.1234, 0.2234, 0.3234) = 0.2234; b: 0.3234; avg 0.2734
        assert_eq!(rows[0], "| zslp | 22.3 | 32.3 | 27.3 | 22.3 | 32.3 | 27.3 |");
    }

    #[test]
    fn curves_pool_tasks() {
        let c = render_curves(&report()).unwrap();
        let lines: Vec<&str> = c.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[1].starts_with("zslp,standard,4,6,"));
    }

    #[test]
    fn empty_report_is_rejected() {
        let empty = EvalReport {
            records: vec![],
            aggregates: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            render_report(&empty, ReportFormat::Markdown, dir.path()),
            Err(Error::EmptyReport)
        ));
        assert!(matches!(EvalReport::from_records(vec![]), Err(Error::EmptyReport)));
    }
}
