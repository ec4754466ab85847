//! Sweep execution with incremental, resumable result logging.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{BenchConfig, TaskConfig, TaskSource};
use super::report::write_report_files;
use crate::adapters::{fit_probe, AdapterSpec};
use crate::embedding::{EmbeddingTable, TextPrototypeSet};
use crate::error::{Error, Result};
use crate::interchange::{load_embeddings, load_texts};
use crate::metrics::{balanced_accuracy, EvalReport, RunKey, RunRecord};
use crate::sampling::{derive_seed, estimate_marginal, sample_support, LabelMarginal, Scenario, SupportSet};
use crate::synth::generate_task;

/// Append-only log of finished runs inside the output directory.
pub const RECORDS_FILE: &str = "records.jsonl";

/// A task with its splits loaded and its label marginal estimated from the
/// full train split.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub name: String,
    pub train: EmbeddingTable,
    pub test: EmbeddingTable,
    pub texts: TextPrototypeSet,
    pub marginal: LabelMarginal,
}

impl PreparedTask {
    pub fn new(name: impl Into<String>, train: EmbeddingTable, test: EmbeddingTable, texts: TextPrototypeSet) -> Result<Self> {
        if train.dim() != texts.dim() || test.dim() != texts.dim() {
            return Err(Error::DimensionMismatch {
                expected: texts.dim(),
                got: if train.dim() != texts.dim() { train.dim() } else { test.dim() },
            });
        }
        if train.num_classes() != texts.num_classes() || test.num_classes() != texts.num_classes() {
            return Err(Error::InvalidTable("train, test and text class counts differ".into()));
        }
        if test.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let marginal = estimate_marginal(train.labels(), train.num_classes())?;
        Ok(Self {
            name: name.into(),
            train,
            test,
            texts,
            marginal,
        })
    }

    pub fn load(task: &TaskConfig, temperature: Option<f64>, renormalize: bool) -> Result<Self> {
        let (train, test, texts) = match &task.source {
            TaskSource::Synth(s) => {
                let generated = generate_task(s)?;
                let texts = if renormalize {
                    generated.texts
                } else {
                    TextPrototypeSet::new(
                        generated.texts.per_class_texts().to_vec(),
                        generated.texts.temperature(),
                        false,
                    )?
                };
                let texts = match temperature {
                    Some(t) => texts.with_temperature(t)?,
                    None => texts,
                };
                (generated.train, generated.test, texts)
            }
            TaskSource::Files { train, test, texts } => (
                load_embeddings(train)?.table,
                load_embeddings(test)?.table,
                load_texts(texts, temperature, renormalize)?,
            ),
        };
        Self::new(task.name.clone(), train, test, texts)
    }
}

/// Fits one adapter and scores it on the test split. Only the fit is timed.
pub fn evaluate_adapter(
    spec: &AdapterSpec,
    support: &SupportSet,
    task: &PreparedTask,
    k: usize,
    repetition: usize,
) -> RunRecord {
    let mut record = RunRecord {
        task: task.name.clone(),
        method: spec.name.clone(),
        scenario: support.scenario(),
        k,
        repetition,
        seed: support.seed(),
        aca: 0.0,
        fit_seconds: 0.0,
        per_class_recall: Vec::new(),
        flags: Vec::new(),
        error: None,
    };
    let start = Instant::now();
    let fit = fit_probe(spec, support, &task.texts);
    record.fit_seconds = start.elapsed().as_secs_f64();
    let scored = fit.and_then(|fit| {
        record.flags = fit.flags.iter().map(ToString::to_string).collect();
        let pred = fit.model.predict(&task.test)?;
        balanced_accuracy(task.test.labels(), &pred.labels, task.texts.num_classes())
    });
    match scored {
        Ok(b) => {
            record.aca = b.aca;
            record.per_class_recall = b.per_class_recall;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

fn failed_record(task: &str, spec: &AdapterSpec, scenario: Scenario, k: usize, rep: usize, seed: u64, err: &Error) -> RunRecord {
    RunRecord {
        task: task.to_string(),
        method: spec.name.clone(),
        scenario,
        k,
        repetition: rep,
        seed,
        aca: 0.0,
        fit_seconds: 0.0,
        per_class_recall: Vec::new(),
        flags: Vec::new(),
        error: Some(err.to_string()),
    }
}

/// Every record of one (task, scenario, K, repetition) cell. All adapters
/// share the cell's support set.
pub fn run_cell(
    task: &PreparedTask,
    adapters: &[&AdapterSpec],
    scenario: Scenario,
    k: usize,
    repetition: usize,
    seed: u64,
) -> Vec<RunRecord> {
    match sample_support(scenario, &task.train, k, &task.marginal, seed) {
        Ok(support) => adapters
            .iter()
            .map(|spec| evaluate_adapter(spec, &support, task, k, repetition))
            .collect(),
        Err(e) => adapters
            .iter()
            .map(|spec| failed_record(&task.name, spec, scenario, k, repetition, seed, &e))
            .collect(),
    }
}

/// Reads the records log, keeping the first record per key and dropping
/// malformed lines (such as a line cut short by an interrupted write).
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(r) => {
                if seen.insert(r.key()) {
                    records.push(r);
                }
            }
            Err(e) => log::warn!("{}:{}: skipping malformed record ({e})", path.display(), lineno + 1),
        }
    }
    Ok(records)
}

fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.partial");
    {
        let mut f = File::create(&tmp)?;
        for r in records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Results(e.to_string()))?)?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the sweep, appending each finished cell to the records log, then
/// writes the report files.
///
/// Records already in the log are kept if they match the configured cell
/// seeds, and their cells are skipped.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<EvalReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let tasks = cfg
        .tasks
        .iter()
        .map(|t| PreparedTask::load(t, cfg.temperature, cfg.renormalize_prototypes))
        .collect::<Result<Vec<_>>>()?;

    let log_path = cfg.output_dir.join(RECORDS_FILE);
    let mut done: Vec<RunRecord> = Vec::new();
    if log_path.exists() {
        let wanted: BTreeSet<&str> = cfg.adapters.iter().map(|a| a.name.as_str()).collect();
        done = read_records(&log_path)?
            .into_iter()
            .filter(|r| {
                wanted.contains(r.method.as_str())
                    && r.seed == derive_seed(cfg.global_seed, &r.task, r.scenario, r.k, r.repetition)
            })
            .collect();
        write_records(&log_path, &done)?;
        log::info!("resuming with {} finished records", done.len());
    }
    let done_keys: HashSet<RunKey> = done.iter().map(RunRecord::key).collect();

    let mut cells = Vec::new();
    for task in &tasks {
        for &scenario in &cfg.scenarios {
            for &k in &cfg.k_grid {
                for rep in 0..cfg.seeds {
                    let pending: Vec<&AdapterSpec> = cfg
                        .adapters
                        .iter()
                        .filter(|a| {
                            !done_keys.contains(&RunKey {
                                task: task.name.clone(),
                                scenario,
                                k,
                                repetition: rep,
                                method: a.name.clone(),
                            })
                        })
                        .collect();
                    if !pending.is_empty() {
                        cells.push((task, scenario, k, rep, pending));
                    }
                }
            }
        }
    }
    log::info!("{} cells to run", cells.len());

    let writer = Mutex::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    let fresh = Mutex::new(Vec::new());
    let work = || {
        cells.par_iter().try_for_each(|(task, scenario, k, rep, pending)| -> Result<()> {
            let seed = derive_seed(cfg.global_seed, &task.name, *scenario, *k, *rep);
            let records = run_cell(task, pending, *scenario, *k, *rep, seed);
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Results(e.to_string()))?);
                lines.push('\n');
            }
            {
                let mut w = writer.lock().expect("records writer poisoned");
                w.write_all(lines.as_bytes())?;
                w.flush()?;
            }
            fresh.lock().expect("records poisoned").extend(records);
            Ok(())
        })
    };
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work)?,
        None => work()?,
    }

    done.extend(fresh.into_inner().expect("records poisoned"));
    let report = EvalReport::from_records(done)?;
    write_report_files(&report, &cfg.output_dir)?;
    let failed = report.failed();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed", report.records.len());
    }
    Ok(report)
}
