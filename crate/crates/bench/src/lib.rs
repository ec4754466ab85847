//! Fixtures shared by the fit-time benchmarks.

use vlprobe_core::sampling::{derive_seed, sample_support, Scenario};
use vlprobe_core::synth::{generate_task, SynthConfig, SynthTask};
use vlprobe_core::{LabelMarginal, SupportSet};

/// One task from the default synthetic suite.
pub fn suite_task(seed: u64) -> SynthTask {
    generate_task(&SynthConfig::suite_default(seed)).expect("suite config is valid")
}

/// A support set of `k` shots per class on average, drawn the same way the
/// sweep draws it.
pub fn support(task: &SynthTask, scenario: Scenario, k: usize, repetition: usize) -> SupportSet {
    let m = LabelMarginal::new(
        task.train
            .class_counts()
            .iter()
            .map(|&n| n as f64 / task.train.len() as f64)
            .collect(),
    )
    .expect("every class is present in the pool");
    let seed = derive_seed(0, "bench", scenario, k, repetition);
    sample_support(scenario, &task.train, k, &m, seed).expect("pool is large enough")
}
