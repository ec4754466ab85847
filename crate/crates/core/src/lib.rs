//! Validation-free few-shot adaptation of frozen vision-language embeddings.
//!
//! The crate covers the whole pipeline on pre-computed embeddings: zero-shot
//! heads built from text prototypes, support-set sampling under balanced and
//! long-tailed label distributions, a closed-form text-regularized probe,
//! gradient-trained reference adapters, balanced-accuracy evaluation,
//! synthetic task generation and a reproducible benchmark harness.

pub mod adapters;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod interchange;
pub mod metrics;
pub mod sampling;
pub mod solver;
pub mod synth;

pub use adapters::{fit_probe, AdapterSpec, Fit, FitFlag, FittedModel, Method, TrainConfig};
pub use embedding::{
    build_zeroshot_head, predict, ClassifierHead, EmbeddingTable, Prediction, TextPrototypeSet,
    DEFAULT_TEMPERATURE,
};
pub use error::{Error, Result};
pub use metrics::{aggregate, balanced_accuracy, scenario_drop, EvalReport, RunRecord};
pub use sampling::{sample_support, LabelMarginal, Scenario, SupportSet};
pub use solver::{sstext_plus_solve, sstext_solve, RegularizerConfig, RepelMode};
