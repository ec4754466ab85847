//! Synthetic embedding tasks with controllable class separation, text
//! fidelity and label imbalance.
//!
//! Class means are uniform on the unit sphere. A sample of class `c` is
//! `normalize(µ_c + σ_v ε)` with `ε ~ N(0, I_D)`, and its text prototype is
//! `normalize(µ_c + σ_t ε')`. Class frequencies follow the geometric marginal
//! `m_c ∝ ρ^{−c/(C−1)}`.

use ndarray::{Array2, Axis};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{argmax, l2_normalize_rows, EmbeddingTable, TextPrototypeSet, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::metrics::balanced_accuracy;
use crate::sampling::{rng_from_seed, LabelMarginal};

/// Redraw guard on the class means.
pub const MAX_MEAN_COSINE: f64 = 0.9;
const MAX_MEAN_REDRAWS: usize = 1000;

fn default_n_train() -> usize {
    5000
}
fn default_n_test() -> usize {
    2000
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Within-class noise scale `σ_v`.
    pub class_noise: f64,
    /// Text-prototype displacement scale `σ_t`.
    pub text_noise: f64,
    /// Ratio `ρ ≥ 1` between the most and least frequent class.
    pub imbalance_ratio: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The suite used by the trend checks: 10 classes in 64 dimensions with a
    /// tenfold imbalance.
    pub fn suite_default(seed: u64) -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            n_train: default_n_train(),
            n_test: default_n_test(),
            class_noise: 0.6,
            text_noise: 0.4,
            imbalance_ratio: 10.0,
            temperature: DEFAULT_TEMPERATURE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.n_train < self.num_classes || self.n_test < self.num_classes {
            return bad("n_train and n_test must be at least num_classes");
        }
        if !(self.class_noise >= 0.0 && self.text_noise >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return bad("imbalance_ratio must be a finite value ≥ 1");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

/// `m_c ∝ ρ^{−c/(C−1)}`, normalized.
pub fn geometric_marginal(num_classes: usize, ratio: f64) -> Result<LabelMarginal> {
    if num_classes == 0 {
        return Err(Error::InvalidMarginal("no classes".into()));
    }
    if num_classes == 1 {
        return LabelMarginal::new(vec![1.0]);
    }
    let raw: Vec<f64> = (0..num_classes)
        .map(|c| ratio.powf(-(c as f64) / (num_classes - 1) as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    LabelMarginal::new(raw.into_iter().map(|m| m / total).collect())
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub train: EmbeddingTable,
    pub test: EmbeddingTable,
    pub texts: TextPrototypeSet,
    pub true_means: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn draw_means(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Result<Array2<f64>> {
    for _ in 0..MAX_MEAN_REDRAWS {
        let means = l2_normalize_rows(gaussian(rng, c, d).view())?;
        let gram = means.dot(&means.t());
        let max_cos = (0..c)
            .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| gram[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if max_cos < MAX_MEAN_COSINE {
            return Ok(means);
        }
    }
    Err(Error::DegenerateConfig(format!(
        "no {c} class means in {d} dimensions with pairwise cosine below {MAX_MEAN_COSINE} after {MAX_MEAN_REDRAWS} draws"
    )))
}

/// One label per class followed by `n − C` draws from the marginal, so every
/// class is present.
fn draw_labels(rng: &mut ChaCha8Rng, marginal: &LabelMarginal, n: usize) -> Vec<usize> {
    let c = marginal.num_classes();
    let mut labels: Vec<usize> = (0..c).collect();
    let mut cum = 0.0;
    let thresholds: Vec<f64> = marginal
        .probs()
        .iter()
        .map(|p| {
            cum += p;
            cum
        })
        .collect();
    for _ in c..n {
        // 53 random mantissa bits, uniform on [0, 1).
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let label = thresholds.iter().position(|&t| u < t).unwrap_or(c - 1);
        labels.push(label);
    }
    labels
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    means: &Array2<f64>,
    marginal: &LabelMarginal,
    n: usize,
    noise: f64,
) -> Result<EmbeddingTable> {
    let labels = draw_labels(rng, marginal, n);
    let mut x = gaussian(rng, n, means.ncols()) * noise;
    for (mut row, &y) in x.axis_iter_mut(Axis(0)).zip(&labels) {
        row += &means.row(y);
    }
    EmbeddingTable::from_unnormalized(x, labels, means.nrows())
}

/// Draws a task deterministically from `cfg.seed`.
pub fn generate_task(cfg: &SynthConfig) -> Result<SynthTask> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let (c, d) = (cfg.num_classes, cfg.dim);
    let means = draw_means(&mut rng, c, d)?;
    let marginal = geometric_marginal(c, cfg.imbalance_ratio)?;
    let train = draw_split(&mut rng, &means, &marginal, cfg.n_train, cfg.class_noise)?;
    let test = draw_split(&mut rng, &means, &marginal, cfg.n_test, cfg.class_noise)?;
    let text_raw = &means + &(gaussian(&mut rng, c, d) * cfg.text_noise);
    let text_rows = l2_normalize_rows(text_raw.view())?;
    let per_class = text_rows
        .axis_iter(Axis(0))
        .map(|r| r.insert_axis(Axis(0)).to_owned())
        .collect();
    let texts = TextPrototypeSet::new(per_class, cfg.temperature, true)?;
    Ok(SynthTask {
        train,
        test,
        texts,
        true_means: means,
    })
}

/// Balanced accuracy of nearest-true-mean classification, a reference
/// ceiling for the task.
pub fn oracle_aca(test: &EmbeddingTable, true_means: &Array2<f64>) -> Result<f64> {
    if test.dim() != true_means.ncols() {
        return Err(Error::DimensionMismatch {
            expected: true_means.ncols(),
            got: test.dim(),
        });
    }
    let scores = test.vectors().dot(&true_means.t());
    let pred: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
    Ok(balanced_accuracy(test.labels(), &pred, true_means.nrows())?.aca)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{build_zeroshot_head, predict};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: 5,
            dim: 16,
            n_train: 400,
            n_test: 200,
            ..SynthConfig::suite_default(seed)
        }
    }

    fn zero_shot_aca(task: &SynthTask) -> f64 {
        let head = build_zeroshot_head(&task.texts).unwrap();
        let pred = predict(&task.test, &head).unwrap();
        balanced_accuracy(task.test.labels(), &pred.labels, task.texts.num_classes())
            .unwrap()
            .aca
    }

    #[test]
    fn geometric_marginal_shape() {
        let m = geometric_marginal(3, 4.0).unwrap();
        let p = m.probs();
        assert!((p[0] / p[2] - 4.0).abs() < 1e-12);
        assert!((p[0] / p[1] - 2.0).abs() < 1e-12);
        let u = geometric_marginal(4, 1.0).unwrap();
        assert!(u.probs().iter().all(|&q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn noiseless_task_is_solved_by_zero_shot() {
        let cfg = SynthConfig {
            class_noise: 0.0,
            text_noise: 0.0,
            ..small(1)
        };
        let task = generate_task(&cfg).unwrap();
        assert_eq!(zero_shot_aca(&task), 1.0);
        assert_eq!(oracle_aca(&task.test, &task.true_means).unwrap(), 1.0);
    }

    #[test]
    fn every_class_is_present_in_both_splits() {
        let cfg = SynthConfig {
            num_classes: 10,
            n_train: 10,
            n_test: 10,
            imbalance_ratio: 1000.0,
            ..small(2)
        };
        let task = generate_task(&cfg).unwrap();
        assert!(task.train.class_counts().iter().all(|&n| n == 1));
        assert!(task.test.class_counts().iter().all(|&n| n == 1));
    }

    #[test]
    fn uniform_marginal_gives_uniform_frequencies() {
        let cfg = SynthConfig {
            n_train: 20_000,
            imbalance_ratio: 1.0,
            ..small(3)
        };
        let task = generate_task(&cfg).unwrap();
        for n in task.train.class_counts() {
            assert!((n as f64 / 20_000.0 - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&small(9)).unwrap();
        let b = generate_task(&small(9)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.texts.prototypes(), b.texts.prototypes());
        let c = generate_task(&small(10)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn random_prototypes_approach_chance() {
        let runs = 50;
        let mean: f64 = (0..runs)
            .map(|s| {
                let cfg = SynthConfig {
                    text_noise: 1e4,
                    class_noise: 0.1,
                    ..small(100 + s)
                };
                zero_shot_aca(&generate_task(&cfg).unwrap())
            })
            .sum::<f64>()
            / runs as f64;
        assert!((mean - 0.2).abs() < 0.05, "mean zero-shot aca {mean}");
    }

    #[test]
    fn oracle_is_invariant_to_relabeling() {
        let task = generate_task(&small(4)).unwrap();
        let base = oracle_aca(&task.test, &task.true_means).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let labels: Vec<usize> = task.test.labels().iter().map(|&y| perm[y]).collect();
        let mut means = task.true_means.clone();
        for (c, &p) in perm.iter().enumerate() {
            means.row_mut(p).assign(&task.true_means.row(c));
        }
        let relabeled = EmbeddingTable::new(task.test.vectors().to_owned(), labels, 5).unwrap();
        assert_eq!(oracle_aca(&relabeled, &means).unwrap(), base);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_task(&SynthConfig { dim: 1, ..small(0) }).is_err());
        assert!(generate_task(&SynthConfig { n_test: 3, ..small(0) }).is_err());
        assert!(generate_task(&SynthConfig { imbalance_ratio: 0.5, ..small(0) }).is_err());
    }

    #[test]
    fn crowded_low_dimensional_means_are_degenerate() {
        let cfg = SynthConfig {
            num_classes: 40,
            dim: 2,
            n_train: 40,
            n_test: 40,
            ..small(0)
        };
        assert!(matches!(generate_task(&cfg), Err(Error::DegenerateConfig(_))));
    }
}
