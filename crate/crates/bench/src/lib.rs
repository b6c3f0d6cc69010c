//! Shared fixtures for the criterion benchmarks.

use rca_core::attribution::{AnomalyEvent, EstimatorSettings, Strategy};
use rca_core::graph::Mode;
use rca_core::mechanisms::FittedScm;
use rca_core::pipeline::{self, BenchParams, ModelKey};
use rca_core::plant::{self, PlantConfig, PlantTrace};

/// One fitted truncated model plus a scoreable trace, sized to keep
/// benchmark startup short.
pub fn scoring_fixture(lags: u32) -> (FittedScm, PlantTrace) {
    let cfg = PlantConfig::bundled();
    let params = BenchParams {
        master_seed: 9,
        train_runs: 1,
        train_minutes: 6_000,
        ..BenchParams::desk(9)
    };
    let traces = pipeline::training_traces(&cfg, &params).expect("training simulates");
    let train = pipeline::training_series(&traces, cfg.warmup_minutes);
    let models = pipeline::fit_models(&cfg, &[ModelKey { mode: Mode::Truncated, lags }], &train)
        .expect("model fits");
    let scm = models.into_iter().next().unwrap().1;
    let trace = plant::simulate(&cfg, 77, 0, 600).expect("trace simulates");
    (scm, trace)
}

pub fn last_step_event(scm: &FittedScm, trace: &PlantTrace) -> AnomalyEvent {
    AnomalyEvent::from_series(scm, &trace.series, trace.len() - 1).expect("event extracts")
}

pub fn permutation_settings(samples: usize, permutations: usize) -> EstimatorSettings {
    EstimatorSettings {
        samples,
        strategy: Strategy::Permutations { count: permutations },
        seed: 4242,
        exact_cap: 12,
    }
}
