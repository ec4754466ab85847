//! Full-batch heavy-ball SGD with cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use crate::error::{Error, Result};

/// Fixed training schedule shared by every gradient-trained baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            momentum: 0.9,
            lr0: 0.1,
            loss: LossKind::Ce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        self.loss.validate()
    }
}

/// `lr0 · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// A differentiable training loss over a flat parameter vector.
pub trait Objective {
    /// Returns the loss and writes the gradient into `grad` (same length as
    /// `params`, overwritten).
    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        self(params, grad)
    }
}

/// Loss evaluated before each update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

/// Heavy-ball updates `u ← μu − lr_t ∇L`, `θ ← θ + u`.
pub fn sgd_train(
    mut params: Vec<f64>,
    objective: &dyn Objective,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainTrace)> {
    cfg.validate()?;
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(cfg.steps),
    };
    for step in 0..cfg.steps {
        let loss = objective.value_and_grad(&params, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            log::warn!("non-finite loss or gradient at step {step}");
            return Err(Error::NonFiniteGradient { step });
        }
        trace.losses.push(loss);
        let lr = cosine_lr(step, cfg.steps, cfg.lr0)?;
        for ((p, u), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
            *u = cfg.momentum * *u - lr * g;
            *p += *u;
        }
    }
    Ok((params, trace))
}
