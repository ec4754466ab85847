//! Is a held-out validation set better spent on model selection or on
//! training?
//!
//! Each repetition draws `2K` shots per class. Arm A trains ZS-LP on the
//! first `K` shots of every class once per schedule in a small grid, picks
//! the schedule with the best validation ACA on the other `K` shots and
//! reports its test ACA. Arm B trains ZS-LP on all `2K` shots with the fixed
//! default schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::BenchConfig;
use super::runner::PreparedTask;
use crate::adapters::{fit_probe, AdapterSpec, Method, TrainConfig};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{balanced_accuracy, summarize, CiMethod};
use crate::sampling::{derive_seed, sample_standard, Scenario, SupportSet};

pub const LR_GRID: [f64; 3] = [0.1, 0.01, 0.001];
pub const STEP_GRID: [usize; 3] = [100, 300, 500];

pub const VAL_STUDY_CSV: &str = "val_study.csv";
pub const VAL_STUDY_MD: &str = "val_study.md";

/// Repetition-level outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValStudyRun {
    pub task: String,
    pub k: usize,
    pub repetition: usize,
    pub selected_lr: f64,
    pub selected_steps: usize,
    /// Test ACA of the validation-selected model trained on `K` shots.
    pub arm_a: f64,
    /// Test ACA of the fixed-schedule model trained on `2K` shots.
    pub arm_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValStudyRow {
    pub task: String,
    pub k: usize,
    pub n: usize,
    pub arm_a_mean: f64,
    pub arm_b_mean: f64,
    /// `None` with a single repetition.
    pub arm_a_ci: Option<(f64, f64)>,
    pub arm_b_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValStudyReport {
    pub runs: Vec<ValStudyRun>,
    pub rows: Vec<ValStudyRow>,
}

impl ValStudyReport {
    /// Means of both arms over every run.
    pub fn overall(&self) -> (f64, f64) {
        let n = self.runs.len() as f64;
        let a = self.runs.iter().map(|r| r.arm_a).sum::<f64>() / n;
        let b = self.runs.iter().map(|r| r.arm_b).sum::<f64>() / n;
        (a, b)
    }
}

fn test_aca(spec: &AdapterSpec, support: &SupportSet, eval: &EmbeddingTable, task: &PreparedTask) -> Result<f64> {
    let fit = fit_probe(spec, support, &task.texts)?;
    let pred = fit.model.predict(eval)?;
    Ok(balanced_accuracy(eval.labels(), &pred.labels, task.texts.num_classes())?.aca)
}

/// Splits a standard `2K` draw into the first `K` rows of every class and
/// the rest.
fn split_shots(pool: &EmbeddingTable, both: &SupportSet, k: usize) -> Result<(SupportSet, EmbeddingTable)> {
    let mut seen = vec![0usize; pool.num_classes()];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (&idx, &label) in both.pool_indices().iter().zip(both.embeddings().labels()) {
        if seen[label] < k {
            train.push(idx);
        } else {
            val.push(idx);
        }
        seen[label] += 1;
    }
    let train = SupportSet::from_pool_rows(pool, train, Scenario::Standard, both.seed())?;
    Ok((train, pool.select(&val)))
}

fn run_one(task: &PreparedTask, k: usize, rep: usize, global_seed: u64) -> Result<ValStudyRun> {
    let seed = derive_seed(global_seed, &task.name, Scenario::Standard, 2 * k, rep);
    let both = sample_standard(&task.train, 2 * k, seed)?;
    let (train, val) = split_shots(&task.train, &both, k)?;

    let mut best: Option<(f64, f64, usize)> = None;
    for &lr0 in &LR_GRID {
        for &steps in &STEP_GRID {
            let spec = AdapterSpec::new(Method::Zslp).with_train(TrainConfig {
                lr0,
                steps,
                ..TrainConfig::default()
            });
            let score = test_aca(&spec, &train, &val, task)?;
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, lr0, steps));
            }
        }
    }
    let (_, lr0, steps) = best.expect("non-empty grid");
    let chosen = AdapterSpec::new(Method::Zslp).with_train(TrainConfig {
        lr0,
        steps,
        ..TrainConfig::default()
    });
    let arm_a = test_aca(&chosen, &train, &task.test, task)?;
    let arm_b = test_aca(&AdapterSpec::new(Method::Zslp), &both, &task.test, task)?;
    Ok(ValStudyRun {
        task: task.name.clone(),
        k,
        repetition: rep,
        selected_lr: lr0,
        selected_steps: steps,
        arm_a,
        arm_b,
    })
}

/// Runs both arms over every task, `K` in the grid and repetition.
pub fn run_val_study_on(tasks: &[PreparedTask], cfg: &BenchConfig) -> Result<ValStudyReport> {
    if let Some(&k) = cfg.k_grid.iter().find(|&&k| k < 2) {
        return Err(Error::InvalidConfig(format!(
            "the validation study needs K ≥ 2, got {k}"
        )));
    }
    for task in tasks {
        let need = 2 * cfg.k_grid.iter().max().copied().unwrap_or(0);
        if let Some((c, &have)) = task.train.class_counts().iter().enumerate().find(|(_, &n)| n < need) {
            return Err(Error::InsufficientPool(format!(
                "task `{}` class {c} has {have} train samples, {need} needed",
                task.name
            )));
        }
    }
    let jobs: Vec<(&PreparedTask, usize, usize)> = tasks
        .iter()
        .flat_map(|t| cfg.k_grid.iter().flat_map(move |&k| (0..cfg.seeds).map(move |r| (t, k, r))))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(t, k, r)| run_one(t, k, r, cfg.global_seed))
            .collect::<Result<Vec<_>>>()
    };
    let runs = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    let mut rows = Vec::new();
    for task in tasks {
        for &k in &cfg.k_grid {
            let cell: Vec<&ValStudyRun> = runs.iter().filter(|r| r.task == task.name && r.k == k).collect();
            let a: Vec<f64> = cell.iter().map(|r| r.arm_a).collect();
            let b: Vec<f64> = cell.iter().map(|r| r.arm_b).collect();
            let (am, _, al, ah) = summarize(&a, CiMethod::Normal);
            let (bm, _, bl, bh) = summarize(&b, CiMethod::Normal);
            let multi = cell.len() > 1;
            rows.push(ValStudyRow {
                task: task.name.clone(),
                k,
                n: cell.len(),
                arm_a_mean: am,
                arm_b_mean: bm,
                arm_a_ci: multi.then_some((al, ah)),
                arm_b_ci: multi.then_some((bl, bh)),
            });
        }
    }
    Ok(ValStudyReport { runs, rows })
}

/// Loads the configured tasks, runs the study and writes its tables into
/// the output directory.
pub fn run_val_study(cfg: &BenchConfig) -> Result<ValStudyReport> {
    if cfg.seeds == 0 {
        return Err(Error::InvalidConfig("seeds must be at least 1".into()));
    }
    let tasks = cfg
        .tasks
        .iter()
        .map(|t| PreparedTask::load(t, cfg.temperature, cfg.renormalize_prototypes))
        .collect::<Result<Vec<_>>>()?;
    let report = run_val_study_on(&tasks, cfg)?;
    write_val_study(&report, &cfg.output_dir)?;
    Ok(report)
}

fn fmt_ci(ci: Option<(f64, f64)>) -> String {
    ci.map(|(l, h)| format!("{l},{h}")).unwrap_or_else(|| ",".into())
}

pub fn write_val_study(report: &ValStudyReport, dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("task,k,n,arm_a_mean,arm_a_ci_low,arm_a_ci_high,arm_b_mean,arm_b_ci_low,arm_b_ci_high\n");
    for r in &report.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.task,
            r.k,
            r.n,
            r.arm_a_mean,
            fmt_ci(r.arm_a_ci),
            r.arm_b_mean,
            fmt_ci(r.arm_b_ci)
        )
        .unwrap();
    }
    let mut md = String::from(
        "| Task | K | A: K train + K val, selected | B: 2K train, fixed schedule |\n|---|---:|---:|---:|\n",
    );
    let cell = |m: f64, ci: Option<(f64, f64)>| match ci {
        Some((l, h)) => format!("{:.1} ± {:.1}", 100.0 * m, 50.0 * (h - l)),
        None => format!("{:.1}", 100.0 * m),
    };
    for r in &report.rows {
        writeln!(
            md,
            "| {} | {} | {} | {} |",
            r.task,
            r.k,
            cell(r.arm_a_mean, r.arm_a_ci),
            cell(r.arm_b_mean, r.arm_b_ci)
        )
        .unwrap();
    }
    let csv_path = dir.join(VAL_STUDY_CSV);
    let md_path = dir.join(VAL_STUDY_MD);
    fs::write(&csv_path, csv)?;
    fs::write(&md_path, md)?;
    Ok(vec![csv_path, md_path])
}
