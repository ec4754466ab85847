//! Support-set construction under the standard, relaxed and realistic
//! scenarios, plus label-marginal estimation.
//!
//! All randomness flows from a single `u64` seed into a ChaCha8 stream. Label
//! draws compare the raw 64-bit output against integer thresholds derived
//! from the cumulative marginal, so the chosen classes never depend on
//! floating-point comparisons of random values. Instance draws inside a
//! class use a partial Fisher-Yates shuffle over `u64` ranges.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

/// Shot grid used when none is configured.
pub const DEFAULT_K_GRID: [usize; 5] = [1, 2, 4, 8, 16];

/// How shots are distributed among classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `K` shots for every class.
    Standard,
    /// One shot per class, the rest drawn from the label marginal.
    Relaxed,
    /// Every label drawn from the label marginal; classes may be missing.
    Realistic,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Standard, Scenario::Relaxed, Scenario::Realistic];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::Relaxed => "relaxed",
            Scenario::Realistic => "realistic",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Scenario::Standard),
            "relaxed" => Ok(Scenario::Relaxed),
            "realistic" => Ok(Scenario::Realistic),
            other => Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Class-frequency distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMarginal {
    probs: Vec<f64>,
}

impl LabelMarginal {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidMarginal("no classes".into()));
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::InvalidMarginal("entries must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMarginal(format!("entries sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Expected number of absent classes among `n` i.i.d. label draws.
    pub fn expected_missing(&self, n: usize) -> f64 {
        self.probs.iter().map(|&p| (1.0 - p).powi(n as i32)).sum()
    }

    /// Integer inverse-CDF thresholds: class `c` is drawn when the raw draw
    /// is below `thresholds[c]` and not below any earlier threshold. The last
    /// class with positive mass absorbs the top of the range.
    fn thresholds(&self) -> Vec<u64> {
        const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64
        let mut cum = 0.0;
        let mut out: Vec<u64> = self
            .probs
            .iter()
            .map(|&p| {
                cum += p;
                // Saturating float-to-int cast.
                (cum * SCALE) as u64
            })
            .collect();
        if let Some(last) = self.probs.iter().rposition(|&p| p > 0.0) {
            out[last] = u64::MAX;
        }
        out
    }
}

struct LabelSampler {
    thresholds: Vec<u64>,
    fallback: usize,
}

impl LabelSampler {
    fn new(m: &LabelMarginal) -> Self {
        Self {
            thresholds: m.thresholds(),
            fallback: m.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0),
        }
    }

    fn draw(&self, rng: &mut impl RngCore) -> usize {
        let u = rng.next_u64();
        self.thresholds
            .iter()
            .position(|&t| u < t)
            .unwrap_or(self.fallback)
    }
}

/// `m_c = count(c) / total`.
pub fn estimate_marginal(labels: &[usize], num_classes: usize) -> Result<LabelMarginal> {
    if labels.is_empty() {
        return Err(Error::EmptyLabelList);
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    LabelMarginal::new(counts.iter().map(|&c| c as f64 / total).collect())
}

/// The labeled adaptation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    embeddings: EmbeddingTable,
    pool_indices: Vec<usize>,
    shot_counts: Vec<usize>,
    scenario: Scenario,
    seed: u64,
}

impl SupportSet {
    /// Wraps the given pool rows. Shot counts are recomputed from labels.
    pub fn from_pool_rows(
        pool: &EmbeddingTable,
        indices: Vec<usize>,
        scenario: Scenario,
        seed: u64,
    ) -> Result<Self> {
        let mut seen = vec![false; pool.len()];
        for &i in &indices {
            if i >= pool.len() {
                return Err(Error::InvalidTable(format!("row {i} outside pool")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidTable(format!("row {i} selected twice")));
            }
        }
        let embeddings = pool.select(&indices);
        Ok(Self::from_table_with_indices(embeddings, indices, scenario, seed))
    }

    /// Uses a whole table as the support set.
    pub fn from_table(embeddings: EmbeddingTable, scenario: Scenario, seed: u64) -> Self {
        let indices = (0..embeddings.len()).collect();
        Self::from_table_with_indices(embeddings, indices, scenario, seed)
    }

    fn from_table_with_indices(
        embeddings: EmbeddingTable,
        pool_indices: Vec<usize>,
        scenario: Scenario,
        seed: u64,
    ) -> Self {
        let shot_counts = embeddings.class_counts();
        Self {
            embeddings,
            pool_indices,
            shot_counts,
            scenario,
            seed,
        }
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    /// Rows of the pool this set was drawn from.
    pub fn pool_indices(&self) -> &[usize] {
        &self.pool_indices
    }

    pub fn shot_counts(&self) -> &[usize] {
        &self.shot_counts
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }
}

/// ChaCha8 stream for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed of one sweep cell.
///
/// SHA-256 over the little-endian global seed, the task id bytes with a
/// length prefix, the scenario name, `K` and the repetition index; the first
/// eight digest bytes read as little-endian `u64`.
pub fn derive_seed(
    global_seed: u64,
    task_id: &str,
    scenario: Scenario,
    k: usize,
    repetition: usize,
) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update((task_id.len() as u64).to_le_bytes());
    h.update(task_id.as_bytes());
    h.update(scenario.as_str().as_bytes());
    h.update((k as u64).to_le_bytes());
    h.update((repetition as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Draws `count` distinct entries of `candidates` uniformly, in draw order.
fn draw_without_replacement(
    candidates: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pool = candidates.to_vec();
    let n = pool.len();
    for i in 0..count {
        let j = i + rng.random_range(0..(n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Draws per-class instances for the requested counts and builds the set.
fn materialize(
    pool: &EmbeddingTable,
    counts: &[usize],
    scenario: Scenario,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<SupportSet> {
    let groups = pool.class_indices();
    for (class, (&needed, group)) in counts.iter().zip(&groups).enumerate() {
        if needed > group.len() {
            return Err(Error::InsufficientClassSamples {
                class,
                needed,
                available: group.len(),
            });
        }
    }
    let mut indices = Vec::with_capacity(counts.iter().sum());
    for (&needed, group) in counts.iter().zip(&groups) {
        indices.extend(draw_without_replacement(group, needed, rng));
    }
    SupportSet::from_pool_rows(pool, indices, scenario, seed)
}

fn check_marginal(pool: &EmbeddingTable, m: &LabelMarginal) -> Result<()> {
    if m.num_classes() != pool.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: pool.num_classes(),
            got: m.num_classes(),
        });
    }
    Ok(())
}

/// Exactly `k` shots per class.
pub fn sample_standard(pool: &EmbeddingTable, k: usize, seed: u64) -> Result<SupportSet> {
    let mut rng = rng_from_seed(seed);
    let counts = vec![k; pool.num_classes()];
    materialize(pool, &counts, Scenario::Standard, seed, &mut rng)
}

/// `N = K·C` labels drawn i.i.d. from `m`, then instances within each class.
pub fn sample_realistic(
    pool: &EmbeddingTable,
    k: usize,
    m: &LabelMarginal,
    seed: u64,
) -> Result<SupportSet> {
    check_marginal(pool, m)?;
    let mut rng = rng_from_seed(seed);
    let sampler = LabelSampler::new(m);
    let mut counts = vec![0usize; pool.num_classes()];
    for _ in 0..k * pool.num_classes() {
        counts[sampler.draw(&mut rng)] += 1;
    }
    materialize(pool, &counts, Scenario::Realistic, seed, &mut rng)
}

/// One shot per class first, the remaining `N − C` labels drawn from `m`.
pub fn sample_relaxed(
    pool: &EmbeddingTable,
    k: usize,
    m: &LabelMarginal,
    seed: u64,
) -> Result<SupportSet> {
    check_marginal(pool, m)?;
    let num_classes = pool.num_classes();
    let mut rng = rng_from_seed(seed);
    let sampler = LabelSampler::new(m);
    let mut counts = vec![1usize; num_classes];
    for _ in 0..(k * num_classes).saturating_sub(num_classes) {
        counts[sampler.draw(&mut rng)] += 1;
    }
    materialize(pool, &counts, Scenario::Relaxed, seed, &mut rng)
}

/// Dispatches on the scenario; `m` is ignored for the standard scenario.
pub fn sample_support(
    scenario: Scenario,
    pool: &EmbeddingTable,
    k: usize,
    m: &LabelMarginal,
    seed: u64,
) -> Result<SupportSet> {
    match scenario {
        Scenario::Standard => sample_standard(pool, k, seed),
        Scenario::Relaxed => sample_relaxed(pool, k, m, seed),
        Scenario::Realistic => sample_realistic(pool, k, m, seed),
    }
}
