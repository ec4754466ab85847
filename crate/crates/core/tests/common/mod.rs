//! Scalar reference implementations and random instances shared by the
//! integration tests. Nothing here calls into the library's math.

#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlprobe_core::sampling::{Scenario, SupportSet};
use vlprobe_core::{EmbeddingTable, TextPrototypeSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    m
}

/// A random support set and prototype set; some classes may lack support.
pub struct Instance {
    pub support: SupportSet,
    pub texts: TextPrototypeSet,
    pub tau: f64,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_c: usize, max_d: usize, max_n: usize, tau: f64) -> Instance {
    let c = rng.random_range(2..=max_c);
    let d = rng.random_range(2..=max_d);
    let n = rng.random_range(1..=max_n);
    let v = unit_rows(rng, n, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let table = EmbeddingTable::new(v, labels, c).unwrap();
    let texts = TextPrototypeSet::from_prototypes(unit_rows(rng, c, d), tau).unwrap();
    Instance {
        support: SupportSet::from_table(table, Scenario::Realistic, rng.random()),
        texts,
        tau,
    }
}

fn rows(support: &SupportSet) -> (Vec<Vec<f64>>, Vec<usize>) {
    let t = support.embeddings();
    (
        t.vectors().rows().into_iter().map(|r| r.to_vec()).collect(),
        t.labels().to_vec(),
    )
}

fn dot(a: &[f64], b: impl IntoIterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn penalty(w: ArrayView2<f64>, t: ArrayView2<f64>, lambdas: &[f64]) -> f64 {
    let mut p = 0.0;
    for c in 0..w.nrows() {
        let mut sq = 0.0;
        for j in 0..w.ncols() {
            sq += (w[[c, j]] - t[[c, j]]).powi(2);
        }
        p += 0.5 * lambdas[c] * sq;
    }
    p
}

/// `−(1/N) Σ_i v_i⊤w_{y_i}/τ + Σ_c (λ_c/2)‖w_c − t_c‖²`
pub fn g1(w: ArrayView2<f64>, inst: &Instance, lambdas: &[f64]) -> f64 {
    let (v, y) = rows(&inst.support);
    let n = v.len() as f64;
    let mut lin = 0.0;
    for (vi, &yi) in v.iter().zip(&y) {
        lin -= dot(vi, w.row(yi).iter().copied()) / inst.tau;
    }
    lin / n + penalty(w, inst.texts.prototypes(), lambdas)
}

/// `(1/N) Σ_i ln Σ_j exp(v_i⊤w_j/τ)`, without max-shifting.
pub fn g2(w: ArrayView2<f64>, inst: &Instance) -> f64 {
    let (v, _) = rows(&inst.support);
    let n = v.len() as f64;
    let mut total = 0.0;
    for vi in &v {
        let logits: Vec<f64> = (0..w.nrows())
            .map(|j| dot(vi, w.row(j).iter().copied()) / inst.tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    }
    total / n
}

/// Mean negative log-likelihood of the softmax plus the penalty.
pub fn full_objective(w: ArrayView2<f64>, inst: &Instance, lambdas: &[f64]) -> f64 {
    let (v, y) = rows(&inst.support);
    let n = v.len() as f64;
    let mut nll = 0.0;
    for (vi, &yi) in v.iter().zip(&y) {
        let logits: Vec<f64> = (0..w.nrows())
            .map(|j| dot(vi, w.row(j).iter().copied()) / inst.tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p = (logits[yi] - m).exp() / z;
        nll -= p.ln();
    }
    nll / n + penalty(w, inst.texts.prototypes(), lambdas)
}

/// Central finite-difference gradient.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Confusion-matrix balanced accuracy.
pub fn confusion_aca(y_true: &[usize], y_pred: &[usize], c: usize) -> f64 {
    let mut cm = vec![vec![0u64; c]; c];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        cm[t][p] += 1;
    }
    let mut recalls = Vec::new();
    for (t, row) in cm.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support > 0 {
            recalls.push(row[t] as f64 / support as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}
