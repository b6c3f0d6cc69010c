//! Root-cause attribution for peak events in systems described by lagged
//! structural causal models.
//!
//! The crate covers the full loop: a minute-resolution factory-energy
//! simulator with injectable faults, summary-graph unfolding over a lag
//! window, mechanism and noise fitting, Shapley attribution of noise terms
//! for observed anomalies, a coefficient-propagation baseline, and the
//! benchmark metrics that compare them.

pub mod attribution;
pub mod control;
pub mod evaluation;
pub mod graph;
pub mod heuristic;
pub mod injection;
pub mod mechanisms;
pub mod pipeline;
pub mod plant;
pub mod rng;
pub mod series;

pub use attribution::{
    attribute_event, Aggregation, AnomalyEvent, AttributionError, AttributionResult,
    CoalitionEstimator, EstimatorSettings, Strategy,
};
pub use control::{battery_mode, BatteryControlParams, BatteryMode};
pub use evaluation::{BenchmarkReport, EvalError, PeakMeta, PeakOutcome, PeakScores};
pub use graph::{GraphError, Instance, LaggedEdge, Mode, NodeId, SummaryGraph, UnfoldedGraph};
pub use heuristic::{FittedTree, HeuristicError, LinearTree, TreeAttribution};
pub use injection::{InjectionKind, InjectionSpec};
pub use mechanisms::{
    fit, ControlSpec, FitError, FitPolicy, FittedScm, MechanismError, MechanismKind, NodeModel,
    NoiseKind, NoiseModel,
};
pub use pipeline::{BenchParams, BenchRun, Corpus, ModelKey, PipelineError};
pub use plant::{detect_peaks, simulate, PeakEvent, PlantConfig, PlantError, PlantTrace, Simulation};
pub use series::{Series, SeriesError};
