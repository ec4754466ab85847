//! Training-free, text-regularized linear probe.
//!
//! The probe minimizes cross-entropy on the support set plus a per-class
//! penalty `(λ_c/2)‖w_c − t_c‖²` that keeps each class weight near its text
//! prototype. Splitting the objective into a linear-plus-quadratic part `g1`
//! and a log-partition part `g2`, and keeping only `g1`, gives the closed form
//!
//! ```text
//! w_c = (1 / (λ_c N τ)) Σ_i y_ic v_i + t_c
//! ```
//!
//! With the class-adaptive choice `λ_c = 1/(K_c τ)` the visual coefficient
//! becomes `K_c / N`, and classes without support fall back to `t_c`. An
//! optional post-processing step moves every prototype by one unit along the
//! direction separating it from the mean of the other classes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassifierHead, TextPrototypeSet, NORM_EPS};
use crate::error::{Error, Result};
use crate::sampling::SupportSet;

/// Text-regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    /// One `λ` shared by every class, given in units of `1/τ`
    /// (`lambda = 0.1` means `λ = 0.1/τ`).
    Global { lambda: f64 },
    /// `λ_c = 1/(K_c τ)`.
    Adaptive,
}

/// Post-processing applied to the closed-form prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepelMode {
    Off,
    /// `w_c − g_c/‖g_c‖`, the sign as originally written down.
    AsPrinted,
    /// `w_c + g_c/‖g_c‖`, pushing prototypes apart.
    #[default]
    RepelPlus,
}

/// Direction of the unit repulsion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepelDirection {
    AsPrinted,
    RepelPlus,
}

impl RepelMode {
    fn direction(self) -> Option<RepelDirection> {
        match self {
            RepelMode::Off => None,
            RepelMode::AsPrinted => Some(RepelDirection::AsPrinted),
            RepelMode::RepelPlus => Some(RepelDirection::RepelPlus),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    #[serde(flatten)]
    pub mode: LambdaMode,
    #[serde(default)]
    pub repel: RepelMode,
}

impl RegularizerConfig {
    /// Adaptive `λ_c` with repulsion, the full training-free solver.
    pub fn plus() -> Self {
        Self {
            mode: LambdaMode::Adaptive,
            repel: RepelMode::RepelPlus,
        }
    }

    /// Fixed `λ = lambda/τ`, no repulsion.
    pub fn global(lambda: f64) -> Self {
        Self {
            mode: LambdaMode::Global { lambda },
            repel: RepelMode::Off,
        }
    }

    pub fn with_repel(mut self, repel: RepelMode) -> Self {
        self.repel = repel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let LambdaMode::Global { lambda } = self.mode {
            if !(lambda.is_finite() && lambda > 0.0) {
                return Err(Error::InvalidConfig(format!("λ must be positive, got {lambda}")));
            }
        }
        Ok(())
    }

    /// Per-class `λ_c`. Adaptive classes with `K_c = 0` get `+∞`.
    pub fn class_lambdas(&self, shot_counts: &[usize], temperature: f64) -> Vec<f64> {
        match self.mode {
            LambdaMode::Global { lambda } => vec![lambda / temperature; shot_counts.len()],
            LambdaMode::Adaptive => shot_counts
                .iter()
                .map(|&k| {
                    if k == 0 {
                        f64::INFINITY
                    } else {
                        1.0 / (k as f64 * temperature)
                    }
                })
                .collect(),
        }
    }
}

fn check_shapes(w: ArrayView2<f64>, support: &SupportSet, texts: &TextPrototypeSet) -> Result<()> {
    if w.dim() != texts.prototypes().dim() {
        return Err(Error::DimensionMismatch {
            expected: texts.num_classes() * texts.dim(),
            got: w.len(),
        });
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
    Ok(())
}

fn check_lambdas(lambdas: &[f64], num_classes: usize) -> Result<()> {
    if lambdas.len() != num_classes {
        return Err(Error::DimensionMismatch {
            expected: num_classes,
            got: lambdas.len(),
        });
    }
    if lambdas.iter().any(|&l| !(l > 0.0) || l.is_nan()) {
        return Err(Error::InvalidConfig("every λ_c must be positive".into()));
    }
    Ok(())
}

fn penalty(w: ArrayView2<f64>, texts: &TextPrototypeSet, lambdas: &[f64]) -> f64 {
    w.rows()
        .into_iter()
        .zip(texts.prototypes().rows())
        .zip(lambdas)
        .map(|((wc, tc), &l)| {
            let d = &wc - &tc;
            0.5 * l * d.dot(&d)
        })
        .sum()
}

fn support_logits(w: ArrayView2<f64>, support: &SupportSet, tau: f64) -> Array2<f64> {
    support.embeddings().vectors().dot(&w.t()) / tau
}

/// Cross-entropy on the support plus the text penalty.
pub fn objective_full(
    w: ArrayView2<f64>,
    support: &SupportSet,
    texts: &TextPrototypeSet,
    lambdas: &[f64],
) -> Result<f64> {
    check_shapes(w, support, texts)?;
    check_lambdas(lambdas, texts.num_classes())?;
    let n = support.len();
    let mut ce = 0.0;
    if n > 0 {
        let logits = support_logits(w, support, texts.temperature());
        for (row, &y) in logits.rows().into_iter().zip(support.embeddings().labels()) {
            ce += log_sum_exp(row.iter().copied()) - row[y];
        }
        ce /= n as f64;
    }
    Ok(ce + penalty(w, texts, lambdas))
}

/// The linear-plus-quadratic part: `−(1/N) Σ_i v_i⊤w_{y_i}/τ + Σ_c (λ_c/2)‖w_c − t_c‖²`.
pub fn objective_g1(
    w: ArrayView2<f64>,
    support: &SupportSet,
    texts: &TextPrototypeSet,
    lambdas: &[f64],
) -> Result<f64> {
    check_shapes(w, support, texts)?;
    check_lambdas(lambdas, texts.num_classes())?;
    let n = support.len();
    let mut linear = 0.0;
    if n > 0 {
        let tau = texts.temperature();
        for (v, &y) in support
            .embeddings()
            .vectors()
            .rows()
            .into_iter()
            .zip(support.embeddings().labels())
        {
            linear -= v.dot(&w.row(y)) / tau;
        }
        linear /= n as f64;
    }
    Ok(linear + penalty(w, texts, lambdas))
}

/// The log-partition part: `(1/N) Σ_i ln Σ_j exp(v_i⊤w_j/τ)`.
pub fn objective_g2(
    w: ArrayView2<f64>,
    support: &SupportSet,
    texts: &TextPrototypeSet,
) -> Result<f64> {
    check_shapes(w, support, texts)?;
    let n = support.len();
    if n == 0 {
        return Ok(0.0);
    }
    let logits = support_logits(w, support, texts.temperature());
    let total: f64 = logits
        .rows()
        .into_iter()
        .map(|row| log_sum_exp(row.iter().copied()))
        .sum();
    Ok(total / n as f64)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-class sums `Σ_i y_ic v_i`, `C × D`.
fn class_sums(support: &SupportSet) -> Array2<f64> {
    let table = support.embeddings();
    let mut sums = Array2::zeros((table.num_classes(), table.dim()));
    for (v, &y) in table.vectors().rows().into_iter().zip(table.labels()) {
        let mut row = sums.row_mut(y);
        row += &v;
    }
    sums
}

/// Builds `w_c = coef_c · Σ_i y_ic v_i + t_c`; classes with no support rows
/// keep `t_c` untouched.
fn combine(support: &SupportSet, texts: &TextPrototypeSet, coef: impl Fn(usize) -> f64) -> Array2<f64> {
    let sums = class_sums(support);
    let mut w = texts.prototypes().to_owned();
    for (c, (mut wc, sc)) in w.rows_mut().into_iter().zip(sums.rows()).enumerate() {
        if support.shot_counts()[c] == 0 {
            continue;
        }
        let k = coef(c);
        wc.zip_mut_with(&sc, |wv, &sv| *wv += k * sv);
    }
    w
}

fn check_inputs(support: &SupportSet, texts: &TextPrototypeSet) -> Result<()> {
    check_shapes(texts.prototypes(), support, texts)
}

/// Closed-form minimizer of `g1` for the given `λ_c`.
pub fn sstext_solve(
    support: &SupportSet,
    texts: &TextPrototypeSet,
    lambdas: &[f64],
) -> Result<ClassifierHead> {
    check_inputs(support, texts)?;
    check_lambdas(lambdas, texts.num_classes())?;
    let tau = texts.temperature();
    let n = support.len() as f64;
    let w = combine(support, texts, |c| 1.0 / (lambdas[c] * n * tau));
    ClassifierHead::new(w, tau)
}

/// Closed-form prototypes with class-adaptive `λ_c`, before repulsion.
///
/// The visual coefficient `1/(λ_c N τ)` reduces to `K_c / N`.
pub fn sstext_plus_prototypes(support: &SupportSet, texts: &TextPrototypeSet) -> Result<Array2<f64>> {
    check_inputs(support, texts)?;
    let n = support.len() as f64;
    let counts = support.shot_counts();
    Ok(combine(support, texts, |c| counts[c] as f64 / n))
}

/// Closed-form solve for any regularizer configuration, then repulsion.
pub fn solve_with_config(
    support: &SupportSet,
    texts: &TextPrototypeSet,
    cfg: &RegularizerConfig,
) -> Result<ClassifierHead> {
    cfg.validate()?;
    let w = match cfg.mode {
        LambdaMode::Adaptive => sstext_plus_prototypes(support, texts)?,
        LambdaMode::Global { .. } => {
            let lambdas = cfg.class_lambdas(support.shot_counts(), texts.temperature());
            sstext_solve(support, texts, &lambdas)?.into_weights()
        }
    };
    let w = match cfg.repel.direction() {
        Some(dir) if w.nrows() >= 2 => repel_prototypes(w.view(), dir)?,
        _ => w,
    };
    ClassifierHead::new(w, texts.temperature())
}

/// The adaptive training-free solver. `cfg.mode` must be adaptive.
pub fn sstext_plus_solve(
    support: &SupportSet,
    texts: &TextPrototypeSet,
    cfg: &RegularizerConfig,
) -> Result<ClassifierHead> {
    if cfg.mode != LambdaMode::Adaptive {
        return Err(Error::InvalidConfig(
            "sstext_plus requires the adaptive λ mode".into(),
        ));
    }
    solve_with_config(support, texts, cfg)
}

/// Moves every prototype one unit along `±g_c/‖g_c‖`, where
/// `g_c = w_c − mean_{c'≠c} w_{c'}`. All `g_c` come from the input matrix.
/// Rows with `‖g_c‖ ≤ NORM_EPS` pass through unchanged.
pub fn repel_prototypes(w: ArrayView2<f64>, direction: RepelDirection) -> Result<Array2<f64>> {
    let c = w.nrows();
    if c < 2 {
        return Err(Error::SingleClass);
    }
    let sign = match direction {
        RepelDirection::AsPrinted => -1.0,
        RepelDirection::RepelPlus => 1.0,
    };
    let mut out = w.to_owned();
    for i in 0..c {
        let mut others = Array1::zeros(w.ncols());
        for (j, row) in w.axis_iter(Axis(0)).enumerate() {
            if j != i {
                others += &row;
            }
        }
        others /= (c - 1) as f64;
        let g = &w.row(i) - &others;
        let norm = g.dot(&g).sqrt();
        if norm <= NORM_EPS {
            continue;
        }
        out.row_mut(i).scaled_add(sign / norm, &g);
    }
    Ok(out)
}
