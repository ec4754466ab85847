//! Gradient-trained linear probes: ZS-LP, CLAP, TaskRes and CrossModal all
//! share this objective and differ in their inputs, penalty and
//! parameterization.

use ndarray::{Array2, ArrayView2};

use super::loss::{loss_value_and_grad, LossKind};
use super::train::Objective;
use crate::error::Result;

/// How the flat parameter vector maps onto the class weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Parameterization {
    /// Parameters are `W` itself, `C × D` row-major.
    Direct,
    /// `W = T + α R`; parameters are the residuals `R`.
    Residual { alpha: f64 },
}

/// Loss of a linear probe scored by `x⊤w_c / τ`, with an optional per-class
/// pull `(λ_c/2)‖w_c − t_c‖²` toward the text prototypes.
#[derive(Debug, Clone)]
pub struct LinearProbeObjective {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    shot_counts: Vec<usize>,
    anchors: Array2<f64>,
    temperature: f64,
    loss: LossKind,
    penalty: Option<Vec<f64>>,
    param: Parameterization,
}

impl LinearProbeObjective {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        anchors: Array2<f64>,
        temperature: f64,
        loss: LossKind,
    ) -> Self {
        let mut shot_counts = vec![0; anchors.nrows()];
        for &l in &labels {
            shot_counts[l] += 1;
        }
        Self {
            inputs,
            labels,
            shot_counts,
            anchors,
            temperature,
            loss,
            penalty: None,
            param: Parameterization::Direct,
        }
    }

    pub fn with_penalty(mut self, lambdas: Vec<f64>) -> Self {
        self.penalty = Some(lambdas);
        self
    }

    pub fn with_parameterization(mut self, param: Parameterization) -> Self {
        self.param = param;
        self
    }

    pub fn num_params(&self) -> usize {
        self.anchors.len()
    }

    /// Parameters that reproduce the text prototypes.
    pub fn initial_params(&self) -> Vec<f64> {
        match self.param {
            Parameterization::Direct => self.anchors.iter().copied().collect(),
            Parameterization::Residual { .. } => vec![0.0; self.anchors.len()],
        }
    }

    /// Class weights for a parameter vector.
    pub fn weights(&self, params: &[f64]) -> Array2<f64> {
        let p = ArrayView2::from_shape(self.anchors.dim(), params).expect("parameter length");
        match self.param {
            Parameterization::Direct => p.to_owned(),
            Parameterization::Residual { alpha } => &self.anchors + &(&p * alpha),
        }
    }

    /// Like [`Objective::value_and_grad`] but surfacing loss errors.
    pub fn try_value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        let w = self.weights(params);
        let logits = self.inputs.dot(&w.t()) / self.temperature;
        let (mut value, g_logits) =
            loss_value_and_grad(self.loss, logits.view(), &self.labels, &self.shot_counts)?;
        let mut g_w = g_logits.t().dot(&self.inputs) / self.temperature;
        if let Some(lambdas) = &self.penalty {
            for ((wc, tc), (mut gc, &l)) in w
                .rows()
                .into_iter()
                .zip(self.anchors.rows())
                .zip(g_w.rows_mut().into_iter().zip(lambdas))
            {
                let d = &wc - &tc;
                value += 0.5 * l * d.dot(&d);
                gc.scaled_add(l, &d);
            }
        }
        if let Parameterization::Residual { alpha } = self.param {
            g_w *= alpha;
        }
        for (dst, src) in grad.iter_mut().zip(g_w.iter()) {
            *dst = *src;
        }
        Ok(value)
    }
}

impl Objective for LinearProbeObjective {
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
