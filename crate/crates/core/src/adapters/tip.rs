//! Key-value cache adapter.
//!
//! The support embeddings act as keys and their one-hot labels as values. A
//! query's logits are its zero-shot logits plus `α Σ_i exp(−β(1 − v⊤k_i)) y_i`.
//! The training-free variant uses the support embeddings as keys directly;
//! the fine-tuned variant learns the keys with the text logits held fixed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::loss::{loss_value_and_grad, LossKind};
use super::train::Objective;
use crate::embedding::TextPrototypeSet;
use crate::error::{Error, Result};
use crate::sampling::SupportSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TipModel {
    keys: Array2<f64>,
    key_labels: Vec<usize>,
    prototypes: Array2<f64>,
    temperature: f64,
    alpha: f64,
    beta: f64,
}

impl TipModel {
    pub fn new(support: &SupportSet, texts: &TextPrototypeSet, alpha: f64, beta: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        if support.dim() != texts.dim() {
            return Err(Error::DimensionMismatch {
                expected: texts.dim(),
                got: support.dim(),
            });
        }
        if support.num_classes() != texts.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: texts.num_classes(),
                got: support.num_classes(),
            });
        }
        Ok(Self {
            keys: support.embeddings().vectors().to_owned(),
            key_labels: support.embeddings().labels().to_vec(),
            prototypes: texts.prototypes().to_owned(),
            temperature: texts.temperature(),
            alpha,
            beta,
        })
    }

    pub fn keys(&self) -> ArrayView2<'_, f64> {
        self.keys.view()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    fn with_keys(&self, keys: Array2<f64>) -> Self {
        Self {
            keys,
            ..self.clone()
        }
    }

    /// Affinities `exp(−β(1 − x_i⊤k_j))`, `n × N`.
    fn affinities(&self, queries: ArrayView2<f64>) -> Array2<f64> {
        let beta = self.beta;
        queries.dot(&self.keys.t()).mapv(|s| (-beta * (1.0 - s)).exp())
    }

    fn logits_with_affinity(&self, queries: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut logits = queries.dot(&self.prototypes.t()) / self.temperature;
        let affinity = self.affinities(queries);
        for (mut row, arow) in logits.rows_mut().into_iter().zip(affinity.rows()) {
            for (&a, &y) in arow.iter().zip(&self.key_labels) {
                row[y] += self.alpha * a;
            }
        }
        (logits, affinity)
    }

    /// Logits for a batch of queries, `n × C`.
    pub fn logits(&self, queries: ArrayView2<f64>) -> Result<Array2<f64>> {
        if queries.ncols() != self.keys.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.keys.ncols(),
                got: queries.ncols(),
            });
        }
        Ok(self.logits_with_affinity(queries).0)
    }
}

/// Training-free cache logits for a single query.
pub fn tip_free_logits(
    v: ArrayView1<f64>,
    support: &SupportSet,
    texts: &TextPrototypeSet,
    alpha: f64,
    beta: f64,
) -> Result<Array1<f64>> {
    let model = TipModel::new(support, texts, alpha, beta)?;
    let q = v.insert_axis(ndarray::Axis(0));
    Ok(model.logits(q)?.row(0).to_owned())
}

/// Loss of the cache adapter on its own support set as a function of the
/// keys (flattened `N × D`).
#[derive(Debug, Clone)]
pub struct TipFtObjective {
    base: TipModel,
    inputs: Array2<f64>,
    labels: Vec<usize>,
    shot_counts: Vec<usize>,
    loss: LossKind,
}

impl TipFtObjective {
    pub fn new(
        support: &SupportSet,
        texts: &TextPrototypeSet,
        alpha: f64,
        beta: f64,
        loss: LossKind,
    ) -> Result<Self> {
        let base = TipModel::new(support, texts, alpha, beta)?;
        Ok(Self {
            base,
            inputs: support.embeddings().vectors().to_owned(),
            labels: support.embeddings().labels().to_vec(),
            shot_counts: support.shot_counts().to_vec(),
            loss,
        })
    }

    pub fn initial_params(&self) -> Vec<f64> {
        self.base.keys.iter().copied().collect()
    }

    pub fn model(&self, params: &[f64]) -> TipModel {
        let keys = Array2::from_shape_vec(self.base.keys.dim(), params.to_vec()).expect("key shape");
        self.base.with_keys(keys)
    }

    pub fn try_value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        let model = self.model(params);
        let (logits, affinity) = model.logits_with_affinity(self.inputs.view());
        let (value, g_logits) =
            loss_value_and_grad(self.loss, logits.view(), &self.labels, &self.shot_counts)?;
        // ∂loss/∂k_j = αβ Σ_i g_{i, y_j} a_ij x_i
        let mut m = affinity;
        for (mut mrow, grow) in m.rows_mut().into_iter().zip(g_logits.rows()) {
            for (a, &y) in mrow.iter_mut().zip(&model.key_labels) {
                *a *= grow[y];
            }
        }
        let g_keys = m.t().dot(&self.inputs) * (model.alpha * model.beta);
        for (dst, src) in grad.iter_mut().zip(g_keys.iter()) {
            *dst = *src;
        }
        Ok(value)
    }
}

impl Objective for TipFtObjective {
    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        match self.try_value_and_grad(params, grad) {
            Ok(v) => v,
            Err(_) => {
                grad.iter_mut().for_each(|g| *g = f64::NAN);
                f64::NAN
            }
        }
    }
}
