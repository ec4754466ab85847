//! Residual bottleneck adapter on the visual branch.
//!
//! `v' = normalize(α · W2 relu(W1 v) + (1 − α) v)`, scored against the fixed
//! zero-shot prototypes. `W1` is `h × D` and `W2` is `D × h` with
//! `h = D / reduction`. `W2` starts at zero so the untrained adapter is the
//! identity up to scale.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::loss::{loss_value_and_grad, LossKind};
use super::train::Objective;
use crate::embedding::{TextPrototypeSet, NORM_EPS};
use crate::error::{Error, Result};
use crate::sampling::{rng_from_seed, SupportSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ClipAdapterModel {
    down: Array2<f64>,
    up: Array2<f64>,
    alpha: f64,
    prototypes: Array2<f64>,
    temperature: f64,
}

struct Forward {
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    mixed_norms: Vec<f64>,
    features: Array2<f64>,
    logits: Array2<f64>,
}

impl ClipAdapterModel {
    /// Down-projection uniform in `±1/√D`, up-projection zero.
    pub fn init(texts: &TextPrototypeSet, alpha: f64, reduction: usize, seed: u64) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::InvalidConfig("reduction must be positive".into()));
        }
        let d = texts.dim();
        let h = (d / reduction).max(1);
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        let down = Array2::from_shape_fn((h, d), |_| rng.random_range(-bound..bound));
        Ok(Self {
            down,
            up: Array2::zeros((d, h)),
            alpha,
            prototypes: texts.prototypes().to_owned(),
            temperature: texts.temperature(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.down.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    fn num_params(&self) -> usize {
        self.down.len() + self.up.len()
    }

    fn params(&self) -> Vec<f64> {
        self.down.iter().chain(self.up.iter()).copied().collect()
    }

    fn with_params(&self, params: &[f64]) -> Self {
        let split = self.down.len();
        Self {
            down: Array2::from_shape_vec(self.down.dim(), params[..split].to_vec()).expect("shape"),
            up: Array2::from_shape_vec(self.up.dim(), params[split..].to_vec()).expect("shape"),
            ..self.clone()
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        let hidden_pre = x.dot(&self.down.t());
        let hidden = hidden_pre.mapv(|a| a.max(0.0));
        let mut mixed = hidden.dot(&self.up.t()) * self.alpha;
        mixed.scaled_add(1.0 - self.alpha, &x);
        let mut mixed_norms = Vec::with_capacity(mixed.nrows());
        for mut row in mixed.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::NormTooSmall(norm));
            }
            row /= norm;
            mixed_norms.push(norm);
        }
        let logits = mixed.dot(&self.prototypes.t()) / self.temperature;
        Ok(Forward {
            hidden_pre,
            hidden,
            mixed_norms,
            features: mixed,
            logits,
        })
    }

    /// Logits for a batch, `n × C`.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.prototypes.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.prototypes.ncols(),
                got: x.ncols(),
            });
        }
        Ok(self.forward(x)?.logits)
    }
}

/// Support-set loss as a function of `[W1, W2]` flattened row-major.
#[derive(Debug, Clone)]
pub struct ClipAdapterObjective {
    base: ClipAdapterModel,
    inputs: Array2<f64>,
    labels: Vec<usize>,
    shot_counts: Vec<usize>,
    loss: LossKind,
}

impl ClipAdapterObjective {
    pub fn new(
        support: &SupportSet,
        texts: &TextPrototypeSet,
        alpha: f64,
        reduction: usize,
        loss: LossKind,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        Ok(Self {
            base: ClipAdapterModel::init(texts, alpha, reduction, support.seed())?,
            inputs: support.embeddings().vectors().to_owned(),
            labels: support.embeddings().labels().to_vec(),
            shot_counts: support.shot_counts().to_vec(),
            loss,
        })
    }

    pub fn num_params(&self) -> usize {
        self.base.num_params()
    }

    pub fn initial_params(&self) -> Vec<f64> {
        self.base.params()
    }

    pub fn model(&self, params: &[f64]) -> ClipAdapterModel {
        self.base.with_params(params)
    }

    pub fn try_value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        let model = self.model(params);
        let fwd = model.forward(self.inputs.view())?;
        let (value, g_logits) =
            loss_value_and_grad(self.loss, fwd.logits.view(), &self.labels, &self.shot_counts)?;

        // Back through the scoring and the normalization.
        let g_feat = g_logits.dot(&model.prototypes) / model.temperature;
        let mut g_mixed = g_feat;
        for ((mut g, f), &norm) in g_mixed
            .rows_mut()
            .into_iter()
            .zip(fwd.features.rows())
            .zip(&fwd.mixed_norms)
        {
            let radial = f.dot(&g);
            g.scaled_add(-radial, &f);
            g /= norm;
        }
        let g_out = g_mixed * model.alpha;
        let g_up = g_out.t().dot(&fwd.hidden);
        let mut g_hidden = g_out.dot(&model.up);
        g_hidden.zip_mut_with(&fwd.hidden_pre, |g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let g_down = g_hidden.t().dot(&self.inputs);

        let split = g_down.len();
        let (head, tail) = grad.split_at_mut(split);
        for (dst, src) in head.iter_mut().zip(g_down.iter()) {
            *dst = *src;
        }
        for (dst, src) in tail.iter_mut().zip(g_up.iter()) {
            *dst = *src;
        }
        Ok(value)
    }
}

impl Objective for ClipAdapterObjective {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{argmax, build_zeroshot_head, l2_normalize_rows};
    use ndarray::array;

    fn texts() -> TextPrototypeSet {
        let t = l2_normalize_rows(
            array![[1.0, 0.2, 0.0, 0.1], [0.0, 1.0, 0.3, 0.0], [0.2, 0.0, 1.0, 0.4]].view(),
        )
        .unwrap();
        TextPrototypeSet::from_prototypes(t, 0.1).unwrap()
    }

    #[test]
    fn untrained_adapter_preserves_zero_shot_argmax() {
        let t = texts();
        let model = ClipAdapterModel::init(&t, 0.7, 4, 3).unwrap();
        let x = l2_normalize_rows(array![[0.3, 0.9, 0.1, 0.0], [0.5, 0.1, 0.8, 0.2]].view()).unwrap();
        let a = model.logits(x.view()).unwrap();
        let b = build_zeroshot_head(&t).unwrap().logits(x.view()).unwrap();
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            assert_eq!(argmax(ra), argmax(rb));
        }
    }

    #[test]
    fn alpha_zero_ignores_the_transform() {
        let t = texts();
        let mut model = ClipAdapterModel::init(&t, 0.0, 2, 3).unwrap();
        model.up.fill(0.7);
        let x = l2_normalize_rows(array![[0.3, 0.9, 0.1, 0.0]].view()).unwrap();
        let a = model.logits(x.view()).unwrap();
        let b = build_zeroshot_head(&t).unwrap().logits(x.view()).unwrap();
        approx::assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn hidden_width_follows_reduction() {
        let model = ClipAdapterModel::init(&texts(), 0.2, 4, 0).unwrap();
        assert_eq!(model.hidden_dim(), 1);
        assert_eq!(model.down.dim(), (1, 4));
        assert_eq!(model.up.dim(), (4, 1));
    }
}
