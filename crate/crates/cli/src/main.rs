//! `bench`: run adapter sweeps, export synthetic tasks, run the validation
//! study and re-render reports.
//!
//! Exit status is 0 on success, 2 when a sweep finished with failed runs and
//! 1 on configuration or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vlprobe_core::harness::{
    export_synth_tasks, read_records, render_report, run_benchmark, run_val_study, BenchConfig,
    ReportFormat, RECORDS_FILE,
};
use vlprobe_core::EvalReport;

#[derive(Parser)]
#[command(name = "bench", version, about = "Few-shot adapter benchmark on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the config's synthetic tasks as interchange files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare validation-based model selection with training on the
    /// validation shots.
    ValStudy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render report files from a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Md,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Md => ReportFormat::Markdown,
        }
    }
}

fn load_config(path: &Path) -> Result<BenchConfig> {
    BenchConfig::from_path(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let report = run_benchmark(&cfg)?;
            let failed = report.failed();
            println!(
                "{} runs, {failed} failed; reports in {}",
                report.records.len(),
                cfg.output_dir.display()
            );
            Ok(if failed > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Synth { config, out } => {
            let cfg = load_config(&config)?;
            for path in export_synth_tasks(&cfg, &out)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValStudy { config } => {
            let cfg = load_config(&config)?;
            let report = run_val_study(&cfg)?;
            let (a, b) = report.overall();
            println!(
                "arm A (K train + K val) {:.1}, arm B (2K train) {:.1}; tables in {}",
                100.0 * a,
                100.0 * b,
                cfg.output_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input, format } => {
            let records = read_records(&input.join(RECORDS_FILE))
                .with_context(|| format!("reading records from {}", input.display()))?;
            let report = EvalReport::from_records(records)?;
            for path in render_report(&report, format.into(), &input)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
