//! Cross-entropy and its long-tail variants, with gradients w.r.t. logits.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::softmax_in_place;
use crate::error::{Error, Result};

fn default_margin_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    /// Mean cross-entropy.
    #[default]
    Ce,
    /// Cross-entropy with class weights `N / (C · K_c)`.
    WeightedCe,
    /// Cross-entropy after subtracting `s / K_c^{1/4}` from the true-class
    /// logit. The margin applies to temperature-scaled logits.
    Ldam {
        #[serde(default = "default_margin_scale")]
        margin_scale: f64,
        /// Also apply the `N / (C · K_c)` class weights.
        #[serde(default)]
        class_weighted: bool,
    },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Ldam { margin_scale, .. } = self {
            if !(margin_scale.is_finite() && *margin_scale >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "LDAM margin scale must be non-negative, got {margin_scale}"
                )));
            }
        }
        Ok(())
    }

    fn rebalances(&self) -> bool {
        !matches!(self, LossKind::Ce)
    }
}

/// Loss value and `∂loss/∂logits` for `N × C` logits.
///
/// `shot_counts` drives the class weights and margins; re-balancing losses
/// need every count to be at least one.
pub fn loss_value_and_grad(
    loss: LossKind,
    logits: ArrayView2<f64>,
    labels: &[usize],
    shot_counts: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if shot_counts.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: shot_counts.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: c,
        });
    }
    if loss.rebalances() {
        if let Some(missing) = shot_counts.iter().position(|&k| k == 0) {
            return Err(Error::MissingClassForRebalancing(missing));
        }
    }
    let mut grad = Array2::zeros((n, c));
    if n == 0 {
        return Ok((0.0, grad));
    }

    let total: usize = shot_counts.iter().sum();
    let class_weight = |y: usize| total as f64 / (c as f64 * shot_counts[y] as f64);
    let (weighted, margin_scale) = match loss {
        LossKind::Ce => (false, 0.0),
        LossKind::WeightedCe => (true, 0.0),
        LossKind::Ldam {
            margin_scale,
            class_weighted,
        } => (class_weighted, margin_scale),
    };

    let mut value = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        g.assign(&row);
        if margin_scale != 0.0 {
            g[y] -= margin_scale / (shot_counts[y] as f64).powf(0.25);
        }
        let max = g.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + g.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let ce = lse - g[y];
        softmax_in_place(g.view_mut());
        g[y] -= 1.0;
        let w = if weighted { class_weight(y) } else { 1.0 };
        value += w * ce;
        g.mapv_inplace(|x| w * x / n as f64);
    }
    Ok((value / n as f64, grad))
}
