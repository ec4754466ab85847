//! Sweep configuration.
//!
//! A config is a TOML file:
//!
//! ```toml
//! global_seed = 0
//! seeds = 20
//! k_grid = [1, 2, 4, 8, 16]
//! scenarios = ["standard", "relaxed", "realistic"]
//! output_dir = "results/default"
//! # temperature = 0.01          # overrides task temperatures
//! # workers = 4                 # defaults to one per core
//! # renormalize_prototypes = true
//!
//! [[tasks]]
//! name = "synth-0"
//! synth = { num_classes = 10, dim = 64, class_noise = 0.6, text_noise = 0.4, imbalance_ratio = 10.0, seed = 0 }
//!
//! [[tasks]]
//! name = "chest-xray"
//! train = "data/cxr/train.vleb"   # paths are relative to the config file
//! test = "data/cxr/test.vleb"
//! texts = "data/cxr/texts.vleb"
//!
//! [[adapters]]
//! method = "sstext_plus"
//!
//! [[adapters]]
//! method = "sstext"
//! name = "sstext_l0.1"
//! sstext = { mode = "global", lambda = 0.1, repel = "repel_plus" }
//!
//! [[adapters]]
//! method = "zslp"
//! train = { steps = 300, momentum = 0.9, lr0 = 0.1, loss = { kind = "ldam" } }
//! ```
//!
//! Per-method sections are `sstext` (`mode`, `lambda` in units of `1/τ`,
//! `repel`), `tip` (`alpha`, `beta`), `taskres` (`alpha`), `clap`
//! (`lambda`) and `clip_adapter` (`alpha`, `reduction`). The environment
//! variable `BENCH_OUTPUT_DIR` replaces `output_dir`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::adapters::{AdapterSpec, Method, TrainConfig};
use crate::error::{Error, Result};
use crate::sampling::{Scenario, DEFAULT_K_GRID};
use crate::solver::{LambdaMode, RegularizerConfig, RepelMode};
use crate::synth::SynthConfig;

pub const OUTPUT_DIR_ENV: &str = "BENCH_OUTPUT_DIR";
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synth(SynthConfig),
    Files {
        train: PathBuf,
        test: PathBuf,
        texts: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub source: TaskSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub global_seed: u64,
    pub seeds: usize,
    pub k_grid: Vec<usize>,
    pub scenarios: Vec<Scenario>,
    /// Replaces every task's temperature when set.
    pub temperature: Option<f64>,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses one per core.
    pub workers: Option<usize>,
    pub renormalize_prototypes: bool,
    pub tasks: Vec<TaskConfig>,
    pub adapters: Vec<AdapterSpec>,
}

impl BenchConfig {
    /// A config with protocol defaults and no tasks or adapters.
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            global_seed: 0,
            seeds: DEFAULT_SEEDS,
            k_grid: DEFAULT_K_GRID.to_vec(),
            scenarios: Scenario::ALL.to_vec(),
            temperature: None,
            output_dir: output_dir.into(),
            workers: None,
            renormalize_prototypes: true,
            tasks: Vec::new(),
            adapters: Vec::new(),
        }
    }

    /// Reads a TOML config, resolving task paths against its directory and
    /// applying the output-directory override from the environment.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text, base)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        raw.resolve(base_dir)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return bad("k_grid must be non-empty with positive values".into());
        }
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.adapters.is_empty() {
            return bad("at least one adapter is required".into());
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("temperature must be positive, got {t}"));
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        let mut names = HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name `{}`", t.name));
            }
            if let TaskSource::Synth(s) = &t.source {
                s.validate()?;
            }
        }
        let mut names = HashSet::new();
        for a in &self.adapters {
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate adapter name `{}`", a.name));
            }
            a.validate()?;
            if let Method::SstextPlus(r) = &a.method {
                if !matches!(r.mode, LambdaMode::Adaptive) {
                    return bad(format!("`{}`: sstext_plus requires mode = \"adaptive\"", a.name));
                }
            }
        }
        Ok(())
    }
}

fn default_seeds() -> usize {
    DEFAULT_SEEDS
}
fn default_k_grid() -> Vec<usize> {
    DEFAULT_K_GRID.to_vec()
}
fn default_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    global_seed: u64,
    #[serde(default = "default_seeds")]
    seeds: usize,
    #[serde(default = "default_k_grid")]
    k_grid: Vec<usize>,
    #[serde(default = "default_scenarios")]
    scenarios: Vec<Scenario>,
    temperature: Option<f64>,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    workers: Option<usize>,
    #[serde(default = "yes")]
    renormalize_prototypes: bool,
    #[serde(default)]
    tasks: Vec<RawTask>,
    #[serde(default)]
    adapters: Vec<RawAdapter>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: String,
    synth: Option<SynthConfig>,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    texts: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SstextSection {
    mode: Option<String>,
    lambda: Option<f64>,
    repel: Option<RepelMode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TipSection {
    alpha: Option<f64>,
    beta: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaSection {
    alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClapSection {
    lambda: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipAdapterSection {
    alpha: Option<f64>,
    reduction: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdapter {
    method: String,
    name: Option<String>,
    train: Option<TrainConfig>,
    sstext: Option<SstextSection>,
    tip: Option<TipSection>,
    taskres: Option<AlphaSection>,
    clap: Option<ClapSection>,
    clip_adapter: Option<ClipAdapterSection>,
}

impl RawConfig {
    fn resolve(self, base: &Path) -> Result<BenchConfig> {
        let tasks = self
            .tasks
            .into_iter()
            .map(|t| t.resolve(base))
            .collect::<Result<Vec<_>>>()?;
        let adapters = self
            .adapters
            .into_iter()
            .map(RawAdapter::resolve)
            .collect::<Result<Vec<_>>>()?;
        let cfg = BenchConfig {
            global_seed: self.global_seed,
            seeds: self.seeds,
            k_grid: self.k_grid,
            scenarios: self.scenarios,
            temperature: self.temperature,
            output_dir: self.output_dir,
            workers: self.workers,
            renormalize_prototypes: self.renormalize_prototypes,
            tasks,
            adapters,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RawTask {
    fn resolve(self, base: &Path) -> Result<TaskConfig> {
        let source = match (self.synth, self.train, self.test, self.texts) {
            (Some(s), None, None, None) => TaskSource::Synth(s),
            (None, Some(train), Some(test), Some(texts)) => TaskSource::Files {
                train: base.join(train),
                test: base.join(test),
                texts: base.join(texts),
            },
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "task `{}` needs either a `synth` table or all of `train`, `test` and `texts`",
                    self.name
                )))
            }
        };
        Ok(TaskConfig {
            name: self.name,
            source,
        })
    }
}

impl RawAdapter {
    fn resolve(self) -> Result<AdapterSpec> {
        let mut method = Method::from_name(&self.method)?;
        let misplaced = |section: &str| {
            Err(Error::InvalidConfig(format!(
                "section `{section}` does not apply to method `{}`",
                self.method
            )))
        };
        if let Some(s) = self.sstext {
            match &mut method {
                Method::Sstext(r) | Method::SstextPlus(r) => apply_sstext(r, s)?,
                _ => return misplaced("sstext"),
            }
        }
        if let Some(s) = self.tip {
            match &mut method {
                Method::TipFree { alpha, beta } | Method::TipFt { alpha, beta } => {
                    *alpha = s.alpha.unwrap_or(*alpha);
                    *beta = s.beta.unwrap_or(*beta);
                }
                _ => return misplaced("tip"),
            }
        }
        if let Some(s) = self.taskres {
            match &mut method {
                Method::Taskres { alpha } => *alpha = s.alpha,
                _ => return misplaced("taskres"),
            }
        }
        if let Some(s) = self.clap {
            match &mut method {
                Method::Clap { lambda } => *lambda = s.lambda,
                _ => return misplaced("clap"),
            }
        }
        if let Some(s) = self.clip_adapter {
            match &mut method {
                Method::ClipAdapter { alpha, reduction } => {
                    *alpha = s.alpha.unwrap_or(*alpha);
                    *reduction = s.reduction.unwrap_or(*reduction);
                }
                _ => return misplaced("clip_adapter"),
            }
        }
        if self.train.is_some() && !method.is_trained() {
            return misplaced("train");
        }
        let mut spec = AdapterSpec::new(method).with_train(self.train.unwrap_or_default());
        if let Some(name) = self.name {
            spec = spec.named(name);
        }
        Ok(spec)
    }
}

fn apply_sstext(r: &mut RegularizerConfig, s: SstextSection) -> Result<()> {
    match (s.mode.as_deref(), s.lambda) {
        (None, None) => {}
        (None | Some("global"), Some(lambda)) => r.mode = LambdaMode::Global { lambda },
        (Some("adaptive"), None) => r.mode = LambdaMode::Adaptive,
        (Some("global"), None) => {
            return Err(Error::InvalidConfig("sstext mode `global` needs `lambda`".into()))
        }
        (Some("adaptive"), Some(_)) => {
            return Err(Error::InvalidConfig("sstext mode `adaptive` takes no `lambda`".into()))
        }
        (Some(other), _) => {
            return Err(Error::InvalidConfig(format!("unknown sstext mode `{other}`")))
        }
    }
    if let Some(repel) = s.repel {
        r.repel = repel;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LossKind;

    const BASE: &str = r#"
        output_dir = "out"
        [[tasks]]
        name = "s"
        synth = { num_classes = 3, dim = 8, class_noise = 0.5, text_noise = 0.2, imbalance_ratio = 2.0, seed = 1 }
    "#;

    fn parse(adapters: &str) -> Result<BenchConfig> {
        BenchConfig::from_toml(&format!("{BASE}\n{adapters}"), Path::new("/cfg"))
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = parse("[[adapters]]\nmethod = \"sstext_plus\"").unwrap();
        assert_eq!(cfg.seeds, 20);
        assert_eq!(cfg.k_grid, vec![1, 2, 4, 8, 16]);
        assert_eq!(cfg.scenarios, Scenario::ALL.to_vec());
        assert_eq!(cfg.adapters[0].method, Method::SstextPlus(RegularizerConfig::plus()));
        assert_eq!(cfg.adapters[0].name, "sstext_plus");
        let TaskSource::Synth(s) = &cfg.tasks[0].source else { panic!() };
        assert_eq!((s.n_train, s.n_test), (5000, 2000));
    }

    #[test]
    fn method_sections_override_defaults() {
        let cfg = parse(
            r#"
            [[adapters]]
            method = "sstext"
            name = "l10"
            sstext = { mode = "global", lambda = 10.0, repel = "repel_plus" }
            [[adapters]]
            method = "sstext_plus"
            name = "norepel"
            sstext = { repel = "off" }
            [[adapters]]
            method = "tip_ft"
            tip = { beta = 5.5 }
            [[adapters]]
            method = "zslp"
            train = { steps = 10, loss = { kind = "ldam", margin_scale = 0.3 } }
            "#,
        )
        .unwrap();
        let a = &cfg.adapters;
        assert_eq!(
            a[0].method,
            Method::Sstext(RegularizerConfig::global(10.0).with_repel(RepelMode::RepelPlus))
        );
        assert_eq!(
            a[1].method,
            Method::SstextPlus(RegularizerConfig::plus().with_repel(RepelMode::Off))
        );
        assert_eq!(a[2].method, Method::TipFt { alpha: 1.0, beta: 5.5 });
        assert_eq!(a[3].train.steps, 10);
        assert_eq!(a[3].train.momentum, 0.9);
        assert_eq!(
            a[3].train.loss,
            LossKind::Ldam {
                margin_scale: 0.3,
                class_weighted: false
            }
        );
    }

    #[test]
    fn file_tasks_resolve_against_the_config_dir() {
        let cfg = BenchConfig::from_toml(
            r#"
            [[tasks]]
            name = "real"
            train = "a/train.vleb"
            test = "a/test.vleb"
            texts = "/abs/texts.vleb"
            [[adapters]]
            method = "zero_shot"
            "#,
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(
            cfg.tasks[0].source,
            TaskSource::Files {
                train: "/cfg/a/train.vleb".into(),
                test: "/cfg/a/test.vleb".into(),
                texts: "/abs/texts.vleb".into(),
            }
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(matches!(
            parse("[[adapters]]\nmethod = \"lp_plus_plus\""),
            Err(Error::UnknownMethod(_))
        ));
        for bad in [
            "[[adapters]]\nmethod = \"zslp\"\nsstext = { repel = \"off\" }",
            "[[adapters]]\nmethod = \"sstext_plus\"\nsstext = { mode = \"global\", lambda = 1.0 }",
            "[[adapters]]\nmethod = \"sstext\"\nsstext = { mode = \"global\" }",
            "[[adapters]]\nmethod = \"sstext\"\nsstext = { lambda = -1.0 }",
            "[[adapters]]\nmethod = \"zslp\"\n[[adapters]]\nmethod = \"zslp\"",
            "[[adapters]]\nmethod = \"zero_shot\"\ntrain = { steps = 3 }",
            "[[adapters]]\nmethod = \"zslp\"\nbogus = 1",
            "",
        ] {
            assert!(matches!(parse(bad), Err(Error::InvalidConfig(_))), "{bad}");
        }
        let zero_seeds = format!("seeds = 0\n{BASE}\n[[adapters]]\nmethod = \"zslp\"");
        assert!(BenchConfig::from_toml(&zero_seeds, Path::new(".")).is_err());
        let zero_k = format!("k_grid = [0, 1]\n{BASE}\n[[adapters]]\nmethod = \"zslp\"");
        assert!(BenchConfig::from_toml(&zero_k, Path::new(".")).is_err());
    }
}
