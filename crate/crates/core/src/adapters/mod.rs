//! Black-box adapters that fit a classifier from a support set and the text
//! prototypes, with every hyper-parameter fixed in advance.
//!
//! Fit functions take only the support set and the text prototypes, so no
//! validation or test data can reach a fit.

mod clip_adapter;
mod linear;
mod loss;
mod tip;
mod train;

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use clip_adapter::{ClipAdapterModel, ClipAdapterObjective};
pub use linear::{LinearProbeObjective, Parameterization};
pub use loss::{loss_value_and_grad, LossKind};
pub use tip::{tip_free_logits, TipFtObjective, TipModel};
pub use train::{cosine_lr, sgd_train, Objective, TrainConfig, TrainTrace};

use crate::embedding::{
    build_zeroshot_head, softmax_rows, ClassifierHead, EmbeddingTable, Prediction,
    TextPrototypeSet,
};
use crate::error::{Error, Result};
use crate::sampling::SupportSet;
use crate::solver::{solve_with_config, sstext_plus_solve, RegularizerConfig};

/// Method names accepted in configuration files.
pub const METHOD_NAMES: [&str; 10] = [
    "zero_shot",
    "zslp",
    "clap",
    "taskres",
    "crossmodal",
    "tip_free",
    "tip_ft",
    "clip_adapter",
    "sstext",
    "sstext_plus",
];

/// An adaptation method and its fixed hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    ZeroShot,
    /// Linear probe initialized at the text prototypes.
    Zslp,
    /// Linear probe with a class-wise pull toward the text prototypes.
    /// `lambda = None` derives `λ_c` from the zero-shot confidence on the
    /// support samples.
    Clap { lambda: Option<f64> },
    /// Trained residual on top of the text prototypes.
    Taskres { alpha: f64 },
    /// Linear probe trained on support rows plus one text row per class.
    Crossmodal,
    TipFree { alpha: f64, beta: f64 },
    TipFt { alpha: f64, beta: f64 },
    ClipAdapter { alpha: f64, reduction: usize },
    /// Closed-form text-regularized probe.
    Sstext(RegularizerConfig),
    /// Closed-form probe with class-adaptive regularization.
    SstextPlus(RegularizerConfig),
}

impl Method {
    /// The method with its default hyper-parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "zero_shot" => Method::ZeroShot,
            "zslp" => Method::Zslp,
            "clap" => Method::Clap { lambda: None },
            "taskres" => Method::Taskres { alpha: 1.0 },
            "crossmodal" => Method::Crossmodal,
            "tip_free" => Method::TipFree {
                alpha: 1.0,
                beta: 1.0,
            },
            "tip_ft" => Method::TipFt {
                alpha: 1.0,
                beta: 1.0,
            },
            "clip_adapter" => Method::ClipAdapter {
                alpha: 0.2,
                reduction: 4,
            },
            "sstext" => Method::Sstext(RegularizerConfig::global(1.0)),
            "sstext_plus" => Method::SstextPlus(RegularizerConfig::plus()),
            other => return Err(Error::UnknownMethod(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Zslp => "zslp",
            Method::Clap { .. } => "clap",
            Method::Taskres { .. } => "taskres",
            Method::Crossmodal => "crossmodal",
            Method::TipFree { .. } => "tip_free",
            Method::TipFt { .. } => "tip_ft",
            Method::ClipAdapter { .. } => "clip_adapter",
            Method::Sstext(_) => "sstext",
            Method::SstextPlus(_) => "sstext_plus",
        }
    }

    /// Whether fitting runs the gradient trainer.
    pub fn is_trained(&self) -> bool {
        matches!(
            self,
            Method::Zslp
                | Method::Clap { .. }
                | Method::Taskres { .. }
                | Method::Crossmodal
                | Method::TipFt { .. }
                | Method::ClipAdapter { .. }
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    /// Label used in reports; defaults to the method name.
    pub name: String,
    pub method: Method,
    /// Ignored by training-free methods.
    pub train: TrainConfig,
}

impl AdapterSpec {
    pub fn new(method: Method) -> Self {
        Self {
            name: method.name().to_string(),
            method,
            train: TrainConfig::default(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_train(mut self, train: TrainConfig) -> Self {
        self.train = train;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_trained() {
            self.train.validate()?;
        }
        match &self.method {
            Method::Sstext(cfg) | Method::SstextPlus(cfg) => cfg.validate(),
            Method::ClipAdapter { alpha, reduction } => {
                if *reduction == 0 || !(0.0..=1.0).contains(alpha) {
                    return Err(Error::InvalidConfig(
                        "clip_adapter needs alpha in [0, 1] and a positive reduction".into(),
                    ));
                }
                Ok(())
            }
            Method::Clap { lambda: Some(l) } if !(*l >= 0.0) => Err(Error::InvalidConfig(
                format!("clap lambda must be non-negative, got {l}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Notes attached to a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// The support set was empty and the zero-shot head was returned.
    EmptySupportFallback,
}

impl fmt::Display for FitFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitFlag::EmptySupportFallback => f.write_str("empty_support_fallback"),
        }
    }
}

/// Any fitted adapter.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Linear(ClassifierHead),
    Tip(TipModel),
    ClipAdapter(ClipAdapterModel),
}

impl FittedModel {
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FittedModel::Linear(h) => h.logits(x),
            FittedModel::Tip(m) => m.logits(x),
            FittedModel::ClipAdapter(m) => m.logits(x),
        }
    }

    pub fn predict(&self, table: &EmbeddingTable) -> Result<Prediction> {
        Prediction::from_logits(&self.logits(table.vectors())?)
    }

    pub fn as_linear(&self) -> Option<&ClassifierHead> {
        match self {
            FittedModel::Linear(h) => Some(h),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub model: FittedModel,
    pub flags: Vec<FitFlag>,
}

impl Fit {
    fn plain(model: FittedModel) -> Self {
        Self {
            model,
            flags: Vec::new(),
        }
    }
}

/// `λ_c` = mean zero-shot probability that class-`c` support samples assign
/// to class `c`, clamped to `[0, 1]`. Classes without support get 1.
pub fn clap_lambdas(support: &SupportSet, texts: &TextPrototypeSet) -> Result<Vec<f64>> {
    let head = build_zeroshot_head(texts)?;
    let probs = softmax_rows(&head.logits(support.embeddings().vectors())?)?;
    let mut sums = vec![0.0; texts.num_classes()];
    for (row, &y) in probs.rows().into_iter().zip(support.embeddings().labels()) {
        sums[y] += row[y];
    }
    Ok(sums
        .iter()
        .zip(support.shot_counts())
        .map(|(&s, &k)| {
            if k == 0 {
                1.0
            } else {
                (s / k as f64).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// A trainable objective and its starting point.
pub enum TrainingProblem {
    Linear(LinearProbeObjective),
    TipFt(TipFtObjective),
    ClipAdapter(ClipAdapterObjective),
}

impl TrainingProblem {
    pub fn objective(&self) -> &dyn Objective {
        match self {
            TrainingProblem::Linear(o) => o,
            TrainingProblem::TipFt(o) => o,
            TrainingProblem::ClipAdapter(o) => o,
        }
    }

    pub fn initial_params(&self) -> Vec<f64> {
        match self {
            TrainingProblem::Linear(o) => o.initial_params(),
            TrainingProblem::TipFt(o) => o.initial_params(),
            TrainingProblem::ClipAdapter(o) => o.initial_params(),
        }
    }

    /// Loss and gradient, surfacing errors instead of NaN.
    pub fn try_value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        match self {
            TrainingProblem::Linear(o) => o.try_value_and_grad(params, grad),
            TrainingProblem::TipFt(o) => o.try_value_and_grad(params, grad),
            TrainingProblem::ClipAdapter(o) => o.try_value_and_grad(params, grad),
        }
    }

    fn into_model(self, params: &[f64], temperature: f64) -> Result<FittedModel> {
        Ok(match self {
            TrainingProblem::Linear(o) => {
                FittedModel::Linear(ClassifierHead::new(o.weights(params), temperature)?)
            }
            TrainingProblem::TipFt(o) => FittedModel::Tip(o.model(params)),
            TrainingProblem::ClipAdapter(o) => FittedModel::ClipAdapter(o.model(params)),
        })
    }
}

/// The objective a trained method minimizes, or `None` for training-free
/// methods.
pub fn training_problem(
    spec: &AdapterSpec,
    support: &SupportSet,
    texts: &TextPrototypeSet,
) -> Result<Option<TrainingProblem>> {
    let tau = texts.temperature();
    let loss = spec.train.loss;
    let x = support.embeddings().vectors().to_owned();
    let y = support.embeddings().labels().to_vec();
    let anchors = texts.prototypes().to_owned();
    let probe = |x, y| LinearProbeObjective::new(x, y, anchors.clone(), tau, loss);
    Ok(Some(match &spec.method {
        Method::Zslp => TrainingProblem::Linear(probe(x, y)),
        Method::Clap { lambda } => {
            let lambdas = match lambda {
                Some(l) => vec![*l; texts.num_classes()],
                None => clap_lambdas(support, texts)?,
            };
            TrainingProblem::Linear(probe(x, y).with_penalty(lambdas))
        }
        Method::Taskres { alpha } => TrainingProblem::Linear(
            probe(x, y).with_parameterization(Parameterization::Residual { alpha: *alpha }),
        ),
        Method::Crossmodal => {
            let inputs = ndarray::concatenate![ndarray::Axis(0), x, anchors];
            let labels = y.into_iter().chain(0..texts.num_classes()).collect();
            TrainingProblem::Linear(probe(inputs, labels))
        }
        Method::TipFt { alpha, beta } => {
            TrainingProblem::TipFt(TipFtObjective::new(support, texts, *alpha, *beta, loss)?)
        }
        Method::ClipAdapter { alpha, reduction } => TrainingProblem::ClipAdapter(
            ClipAdapterObjective::new(support, texts, *alpha, *reduction, loss)?,
        ),
        Method::ZeroShot | Method::TipFree { .. } | Method::Sstext(_) | Method::SstextPlus(_) => {
            return Ok(None)
        }
    }))
}

fn check_compatible(support: &SupportSet, texts: &TextPrototypeSet) -> Result<()> {
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

/// Fits an adapter on the support set alone.
///
/// Methods that need support samples return the zero-shot head with
/// [`FitFlag::EmptySupportFallback`] when the support set is empty.
/// CrossModal still trains on its text rows in that case.
pub fn fit_probe(spec: &AdapterSpec, support: &SupportSet, texts: &TextPrototypeSet) -> Result<Fit> {
    spec.validate()?;
    check_compatible(support, texts)?;
    let zero_shot = || build_zeroshot_head(texts).map(FittedModel::Linear);

    let needs_support = spec.method.is_trained() || matches!(spec.method, Method::TipFree { .. });
    if support.is_empty() && needs_support && spec.method != Method::Crossmodal {
        log::debug!("{}: empty support, returning the zero-shot head", spec.name);
        return Ok(Fit {
            model: zero_shot()?,
            flags: vec![FitFlag::EmptySupportFallback],
        });
    }

    match &spec.method {
        Method::ZeroShot => Ok(Fit::plain(zero_shot()?)),
        Method::TipFree { alpha, beta } => Ok(Fit::plain(FittedModel::Tip(TipModel::new(
            support, texts, *alpha, *beta,
        )?))),
        Method::Sstext(cfg) => Ok(Fit::plain(FittedModel::Linear(solve_with_config(
            support, texts, cfg,
        )?))),
        Method::SstextPlus(cfg) => Ok(Fit::plain(FittedModel::Linear(sstext_plus_solve(
            support, texts, cfg,
        )?))),
        _ => {
            let problem = training_problem(spec, support, texts)?
                .expect("trained methods define an objective");
            let init = problem.initial_params();
            // Surface loss preconditions (e.g. re-balancing with a missing
            // class) as their own errors rather than as NaN gradients.
            problem.try_value_and_grad(&init, &mut vec![0.0; init.len()])?;
            let (params, _) = sgd_train(init, problem.objective(), &spec.train)?;
            Ok(Fit::plain(problem.into_model(&params, texts.temperature())?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{argmax, l2_normalize_rows};
    use crate::sampling::Scenario;
    use ndarray::array;

    fn texts() -> TextPrototypeSet {
        let t = l2_normalize_rows(array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.1], [0.1, 0.0, 1.0]].view())
            .unwrap();
        TextPrototypeSet::from_prototypes(t, 0.1).unwrap()
    }

    fn support() -> SupportSet {
        let v = array![[0.9, 0.3, 0.1], [0.2, 0.9, 0.3], [0.4, 0.1, 0.9], [0.8, 0.5, 0.0]];
        let t = EmbeddingTable::from_unnormalized(v, vec![0, 1, 2, 0], 3).unwrap();
        SupportSet::from_table(t, Scenario::Realistic, 17)
    }

    fn empty() -> SupportSet {
        SupportSet::from_table(EmbeddingTable::empty(3, 3).unwrap(), Scenario::Realistic, 0)
    }

    #[test]
    fn unknown_method_is_rejected() {
        assert!(matches!(Method::from_name("lp++"), Err(Error::UnknownMethod(_))));
        for name in METHOD_NAMES {
            assert_eq!(Method::from_name(name).unwrap().name(), name);
        }
    }

    #[test]
    fn zslp_without_steps_is_zero_shot() {
        let t = texts();
        let problem = training_problem(&AdapterSpec::new(Method::Zslp), &support(), &t)
            .unwrap()
            .unwrap();
        let init = problem.initial_params();
        let model = problem.into_model(&init, t.temperature()).unwrap();
        assert_eq!(model, FittedModel::Linear(build_zeroshot_head(&t).unwrap()));
    }

    #[test]
    fn taskres_with_zero_residual_is_zero_shot() {
        let t = texts();
        let spec = AdapterSpec::new(Method::Taskres { alpha: 1.0 });
        let problem = training_problem(&spec, &support(), &t).unwrap().unwrap();
        let zeros = vec![0.0; problem.initial_params().len()];
        let model = problem.into_model(&zeros, t.temperature()).unwrap();
        assert_eq!(model, FittedModel::Linear(build_zeroshot_head(&t).unwrap()));
    }

    #[test]
    fn empty_support_falls_back_to_zero_shot() {
        let t = texts();
        for name in ["zslp", "clap", "taskres", "tip_free", "tip_ft", "clip_adapter"] {
            let spec = AdapterSpec::new(Method::from_name(name).unwrap());
            let fit = fit_probe(&spec, &empty(), &t).unwrap();
            assert_eq!(fit.flags, vec![FitFlag::EmptySupportFallback], "{name}");
            assert_eq!(fit.model, FittedModel::Linear(build_zeroshot_head(&t).unwrap()));
        }
    }

    #[test]
    fn crossmodal_trains_on_text_rows_alone() {
        let t = texts();
        let fit = fit_probe(&AdapterSpec::new(Method::Crossmodal), &empty(), &t).unwrap();
        assert!(fit.flags.is_empty());
        let logits = fit.model.logits(t.prototypes()).unwrap();
        for (c, row) in logits.rows().into_iter().enumerate() {
            assert_eq!(argmax(row), c);
        }
    }

    #[test]
    fn clap_with_zero_lambda_matches_zslp_bit_for_bit() {
        let t = texts();
        let s = support();
        let zslp = fit_probe(&AdapterSpec::new(Method::Zslp), &s, &t).unwrap();
        let clap = fit_probe(&AdapterSpec::new(Method::Clap { lambda: Some(0.0) }), &s, &t).unwrap();
        assert_eq!(zslp.model, clap.model);
    }

    #[test]
    fn clap_lambdas_are_zero_shot_confidences() {
        let t = texts();
        let s = support();
        let l = clap_lambdas(&s, &t).unwrap();
        assert!(l.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let partial = SupportSet::from_table(s.embeddings().select(&[0, 3]), Scenario::Realistic, 0);
        let l = clap_lambdas(&partial, &t).unwrap();
        assert_eq!(&l[1..], &[1.0, 1.0]);
    }

    #[test]
    fn fits_are_deterministic() {
        let t = texts();
        let s = support();
        for name in METHOD_NAMES {
            let spec = AdapterSpec::new(Method::from_name(name).unwrap());
            let a = fit_probe(&spec, &s, &t).unwrap();
            let b = fit_probe(&spec, &s, &t).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn rebalancing_loss_rejects_missing_classes() {
        let t = texts();
        let partial = SupportSet::from_table(support().embeddings().select(&[0, 1]), Scenario::Realistic, 0);
        let spec = AdapterSpec::new(Method::Zslp).with_train(TrainConfig {
            loss: LossKind::WeightedCe,
            ..Default::default()
        });
        assert!(matches!(
            fit_probe(&spec, &partial, &t),
            Err(Error::MissingClassForRebalancing(2))
        ));
    }

    #[test]
    fn zslp_loss_decreases_early_on_separable_data() {
        let t = TextPrototypeSet::from_prototypes(
            l2_normalize_rows(array![[1.0, 1.0], [1.0, -0.2]].view()).unwrap(),
            0.1,
        )
        .unwrap();
        let v = array![[1.0, 0.1], [0.9, 0.2], [0.1, 1.0], [0.2, 0.9]];
        let table = EmbeddingTable::from_unnormalized(v, vec![0, 0, 1, 1], 2).unwrap();
        let s = SupportSet::from_table(table, Scenario::Standard, 0);
        let problem = training_problem(&AdapterSpec::new(Method::Zslp), &s, &t)
            .unwrap()
            .unwrap();
        let (_, trace) =
            sgd_train(problem.initial_params(), problem.objective(), &TrainConfig::default())
                .unwrap();
        let first = &trace.losses[..50];
        for w in first.windows(11) {
            assert!(w[10] <= w[0], "loss rose over a 10-step window: {w:?}");
        }
    }
}
