//! Benchmark harness: configuration, sweeps, reports and the validation
//! study.

mod config;
mod report;
mod runner;
mod val_study;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{BenchConfig, TaskConfig, TaskSource, DEFAULT_SEEDS, OUTPUT_DIR_ENV};
pub use report::{
    aggregates_from_csv, aggregates_from_json, aggregates_to_csv, json_report, method_order,
    render_curves, render_markdown, render_report, report_to_json, write_report_files, JsonReport,
    ReportFormat, AGGREGATES_CSV, CURVES_CSV, DETERMINISTIC_FILES, RECORDS_CSV, REPORT_JSON,
    REPORT_MD, TIMINGS_CSV,
};
pub use runner::{
    evaluate_adapter, read_records, run_benchmark, run_cell, PreparedTask, RECORDS_FILE,
};
pub use val_study::{
    run_val_study, run_val_study_on, write_val_study, ValStudyReport, ValStudyRow, ValStudyRun,
    LR_GRID, STEP_GRID, VAL_STUDY_CSV, VAL_STUDY_MD,
};

use crate::error::Result;
use crate::interchange::{write_manifest, write_table, write_texts, Manifest};

/// Writes every synthetic task of the config as `<out>/<task>/{train,test,texts}.vleb`
/// with manifests. File-backed tasks are skipped.
pub fn export_synth_tasks(cfg: &BenchConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for task in &cfg.tasks {
        let TaskSource::Synth(_) = &task.source else {
            log::info!("skipping file-backed task `{}`", task.name);
            continue;
        };
        let prepared = PreparedTask::load(task, cfg.temperature, cfg.renormalize_prototypes)?;
        let dir = out.join(&task.name);
        fs::create_dir_all(&dir)?;
        let class_names: Vec<String> =
            (0..prepared.texts.num_classes()).map(|c| format!("class_{c}")).collect();
        let tau = prepared.texts.temperature();
        for (split, table) in [("train", &prepared.train), ("test", &prepared.test)] {
            let path = dir.join(format!("{split}.vleb"));
            write_table(&path, table, tau)?;
            write_manifest(&path, &manifest(&task.name, &class_names, split))?;
            written.push(path);
        }
        let path = dir.join("texts.vleb");
        write_texts(&path, &prepared.texts)?;
        write_manifest(&path, &manifest(&task.name, &class_names, "text"))?;
        written.push(path);
    }
    Ok(written)
}

fn manifest(task: &str, class_names: &[String], split: &str) -> Manifest {
    Manifest {
        task: task.to_string(),
        class_names: class_names.to_vec(),
        split: split.to_string(),
        source_model: "synthetic".to_string(),
    }
}
