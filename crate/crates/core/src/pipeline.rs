//! Benchmark pipeline: fault-free training runs, the injected-fault corpus,
//! model fitting and peak scoring, assembled into one report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_event, Aggregation, AnomalyEvent, AttributionError, EstimatorSettings, Strategy,
};
use crate::evaluation::{BenchmarkReport, PeakMeta, PeakOutcome, PeakScores};
use crate::graph::{GraphError, Mode, NodeId};
use crate::heuristic::{FittedTree, HeuristicError, LinearTree};
use crate::injection::{
    case_seed, train_seed, InjectionCase, InjectionError, InjectionKind, InjectionSpec,
    PairedRun,
};
use crate::mechanisms::{fit, ControlSpec, FitError, FitPolicy, FittedScm};
use crate::plant::{self, nodes, PeakEvent, PlantConfig, PlantError, PlantTrace};
use crate::rng::child_seed;
use crate::series::{Series, SeriesError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("corpus at {dir}: {message}")]
    Corpus { dir: PathBuf, message: String },
}

/// Sizes and seeds of one benchmark run. Everything random hangs off the
/// master seed through named child streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchParams {
    pub master_seed: u64,
    /// Fault-free training runs.
    pub train_runs: usize,
    /// Length of each training run, warmup included.
    pub train_minutes: usize,
    /// Paired runs per injection kind.
    pub cases_per_kind: usize,
    /// Fault start, minutes from run start.
    pub t_i: usize,
    /// Peaks topping out more than this many minutes after the fault are
    /// not the fault's to answer for.
    pub tau: usize,
    /// Extra minutes simulated past the acceptance window.
    pub trailing: usize,
    /// Monte Carlo samples per coalition probability.
    pub samples: usize,
    /// Sampled permutations per attribution.
    pub permutations: usize,
}

impl BenchParams {
    /// Desk-scale defaults: an afternoon of machine time, not a cluster.
    pub fn desk(master_seed: u64) -> Self {
        BenchParams {
            master_seed,
            train_runs: 3,
            train_minutes: 44_640,
            cases_per_kind: 10,
            t_i: 3_720,
            tau: 60,
            trailing: 30,
            samples: 2_000,
            permutations: 200,
        }
    }

    /// Minutes each paired run covers.
    pub fn case_duration(&self) -> usize {
        self.t_i + self.tau + self.trailing
    }
}

/// Which lagged model to fit: unfolding mode plus window depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelKey {
    pub mode: Mode,
    pub lags: u32,
}

impl ModelKey {
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Truncated => format!("truncated-L{}", self.lags),
            Mode::NonTruncated => format!("non-truncated-L{}", self.lags),
        }
    }
}

/// Keys for the requested truncated and non-truncated window depths.
pub fn model_keys(truncated: &[u32], non_truncated: &[u32]) -> Vec<ModelKey> {
    let mut keys: Vec<ModelKey> = truncated
        .iter()
        .map(|&lags| ModelKey { mode: Mode::Truncated, lags })
        .collect();
    keys.extend(
        non_truncated.iter().map(|&lags| ModelKey { mode: Mode::NonTruncated, lags }),
    );
    keys
}

/// Fit policy for the plant: the battery controller is a known rule, every
/// other node gets a linear regression with empirical noise.
pub fn plant_fit_policy(cfg: &PlantConfig) -> FitPolicy {
    let mut policy = FitPolicy::default();
    policy.known.insert(
        NodeId::new(nodes::BATTERY_CONTROL),
        ControlSpec::BatteryTwoPoint {
            draw: NodeId::new(nodes::GRID),
            soc: NodeId::new(nodes::SOC),
            params: cfg.battery.control_params(),
        },
    );
    policy
}

pub fn training_traces(
    cfg: &PlantConfig,
    params: &BenchParams,
) -> Result<Vec<PlantTrace>, PlantError> {
    (0..params.train_runs)
        .map(|i| plant::simulate(cfg, train_seed(params.master_seed, i), 0, params.train_minutes))
        .collect()
}

/// Training columns with the warmup stripped.
pub fn training_series(traces: &[PlantTrace], warmup: usize) -> Vec<Series> {
    traces
        .iter()
        .map(|t| t.series.slice(warmup.min(t.series.len()), t.series.len()))
        .collect()
}

/// All training rows stacked into one series, for scorers that take a
/// single table.
pub fn pooled_series(train: &[Series]) -> Result<Series, SeriesError> {
    let names = train.first().map(|s| s.names().to_vec()).unwrap_or_default();
    let mut pooled = Series::new(names.clone())?;
    let mut row = vec![0.0; names.len()];
    for s in train {
        for step in 0..s.len() {
            for (slot, name) in row.iter_mut().zip(&names) {
                *slot = s.value(name, step)?;
            }
            pooled.push_row(&row)?;
        }
    }
    Ok(pooled)
}

pub fn fit_models(
    cfg: &PlantConfig,
    keys: &[ModelKey],
    train: &[Series],
) -> Result<Vec<(ModelKey, FittedScm)>, PipelineError> {
    let policy = plant_fit_policy(cfg);
    let target = NodeId::new(nodes::GRID);
    let refs: Vec<&Series> = train.iter().collect();
    keys.iter()
        .map(|&key| {
            let graph = plant::summary_graph().unfold(&target, key.lags, key.mode)?;
            Ok((key, fit(&graph, &refs, &policy)?))
        })
        .collect()
}

/// Tree baseline over the plant, state and clock nodes left out.
pub fn plant_tree() -> LinearTree {
    let excluded = [
        NodeId::new(nodes::SOC),
        NodeId::new(nodes::BATTERY_CONTROL),
        NodeId::new(nodes::DAYTIME),
    ];
    LinearTree::from_summary(&plant::summary_graph(), nodes::GRID, &excluded)
        .expect("plant collapses to a tree")
}

pub fn fit_tree(train: &[Series]) -> Result<FittedTree, PipelineError> {
    Ok(FittedTree::fit(plant_tree(), &pooled_series(train)?)?)
}

/// The injected-fault corpus: paired runs plus their attributable peaks.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub params: BenchParams,
    pub cases: Vec<InjectionCase>,
}

pub fn build_case(
    cfg: &PlantConfig,
    params: &BenchParams,
    kind: InjectionKind,
    index: usize,
) -> Result<InjectionCase, PipelineError> {
    let seed = case_seed(params.master_seed, &kind, index);
    let spec = InjectionSpec::new(kind, params.t_i);
    let run = PairedRun::simulate(cfg, seed, 0, params.case_duration(), spec)?;
    let peaks = run.attributable_peaks(cfg.peak_limit_kw, cfg.peak_min_width, params.tau);
    Ok(InjectionCase { seed, index, run, peaks })
}

pub fn build_corpus(cfg: &PlantConfig, params: &BenchParams) -> Result<Corpus, PipelineError> {
    let jobs: Vec<(InjectionKind, usize)> = InjectionKind::catalog()
        .into_iter()
        .flat_map(|kind| (0..params.cases_per_kind).map(move |i| (kind, i)))
        .collect();
    let cases: Result<Vec<InjectionCase>, PipelineError> = jobs
        .into_par_iter()
        .map(|(kind, index)| build_case(cfg, params, kind, index))
        .collect();
    Ok(Corpus { params: *params, cases: cases? })
}

/// Scores every attributable peak with every scorer and collects the raw
/// per-peak records. Lagged models contribute one row per lag fold, the
/// tree baseline a single unfolded row.
pub fn score_corpus(
    corpus: &Corpus,
    models: &[(ModelKey, FittedScm)],
    tree: Option<&FittedTree>,
    cfg: &PlantConfig,
) -> Result<BenchmarkReport, PipelineError> {
    let universe: Vec<NodeId> = plant::summary_graph().nodes().cloned().collect();
    let params = &corpus.params;
    let tasks: Vec<(&InjectionCase, PeakEvent)> = corpus
        .cases
        .iter()
        .flat_map(|case| case.peaks.iter().map(move |p| (case, *p)))
        .collect();
    let nested: Result<Vec<Vec<PeakOutcome>>, PipelineError> = tasks
        .par_iter()
        .map(|(case, peak)| {
            let spec = &case.run.spec;
            let cause = NodeId::new(spec.kind.affected_node());
            let meta = |model: &str, agg: &str, it_score: Option<f64>| PeakMeta {
                injection: spec.kind.label().to_string(),
                case: case.index,
                model: model.to_string(),
                agg: agg.to_string(),
                cause: cause.clone(),
                t_i: spec.t_i,
                duration: spec.duration as u32,
                peak_t: peak.t,
                peak_magnitude: peak.magnitude,
                it_score,
            };
            let mut rows = Vec::new();
            for (key, scm) in models {
                let label = key.label();
                let event = AnomalyEvent::from_series(scm, &case.run.faulty.series, peak.t)?;
                let settings = EstimatorSettings {
                    samples: params.samples,
                    strategy: Strategy::Permutations { count: params.permutations },
                    seed: child_seed(
                        params.master_seed,
                        &format!(
                            "attribute-{label}-{}-{}-{}",
                            spec.kind.label(),
                            case.index,
                            peak.t
                        ),
                    ),
                    exact_cap: 12,
                };
                let result = attribute_event(scm, &event, settings)?;
                let scores = PeakScores::from_attribution(&result);
                for (agg, agg_label) in
                    [(Aggregation::Max, "max"), (Aggregation::Sum, "sum")]
                {
                    rows.push(PeakOutcome::evaluate(
                        meta(&label, agg_label, Some(result.it_score)),
                        &scores,
                        agg,
                        &universe,
                    ));
                }
            }
            if let Some(tree) = tree {
                // A peak the walk-back cannot reach scores nothing; the
                // cause then ranks below every scored node.
                let scores =
                    match tree.attribute(&case.run.faulty.series, peak.t, cfg.peak_limit_kw) {
                        Ok(att) => PeakScores::from_tree(&att),
                        Err(HeuristicError::NoOvershootFound { .. }) => {
                            PeakScores::new(BTreeMap::new())
                        }
                        Err(e) => return Err(e.into()),
                    };
                rows.push(PeakOutcome::evaluate(
                    meta("heuristic", "none", None),
                    &scores,
                    Aggregation::Sum,
                    &universe,
                ));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for chunk in nested? {
        rows.extend(chunk);
    }
    Ok(BenchmarkReport::new(rows))
}

/// Everything one full benchmark produces.
pub struct BenchRun {
    pub corpus: Corpus,
    pub models: Vec<(ModelKey, FittedScm)>,
    pub tree: Option<FittedTree>,
    pub report: BenchmarkReport,
}

/// Trains, builds the corpus, scores it. The one-call version of the
/// pipeline; the command line splits the same steps for resume.
pub fn run_bench(
    cfg: &PlantConfig,
    params: &BenchParams,
    keys: &[ModelKey],
    with_tree: bool,
) -> Result<BenchRun, PipelineError> {
    let traces = training_traces(cfg, params)?;
    let train = training_series(&traces, cfg.warmup_minutes);
    let models = fit_models(cfg, keys, &train)?;
    let tree = if with_tree { Some(fit_tree(&train)?) } else { None };
    let corpus = build_corpus(cfg, params)?;
    let report = score_corpus(&corpus, &models, tree.as_ref(), cfg)?;
    Ok(BenchRun { corpus, models, tree, report })
}

#[derive(Serialize, Deserialize)]
struct CaseFile {
    seed: u64,
    index: usize,
    spec: InjectionSpec,
    peaks: Vec<PeakEvent>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    params: BenchParams,
    config_hash: String,
    cases: Vec<CaseEntry>,
}

#[derive(Serialize, Deserialize)]
struct CaseEntry {
    kind: String,
    index: usize,
    dir: String,
}

/// Writes one case as a directory: paired traces plus a JSON record of the
/// fault and its attributable peaks.
pub fn save_case(case: &InjectionCase, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    case.run.faulty.save(&dir.join("faulty.csv"))?;
    case.run.baseline.save(&dir.join("baseline.csv"))?;
    let record = CaseFile {
        seed: case.seed,
        index: case.index,
        spec: case.run.spec.clone(),
        peaks: case.peaks.clone(),
    };
    fs::write(dir.join("case.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

/// Reads a case directory back and re-checks the paired prefix.
pub fn load_case(dir: &Path) -> Result<InjectionCase, PipelineError> {
    let record: CaseFile =
        serde_json::from_str(&fs::read_to_string(dir.join("case.json"))?)?;
    let faulty = PlantTrace::load(&dir.join("faulty.csv"))?;
    let baseline = PlantTrace::load(&dir.join("baseline.csv"))?;
    let run = PairedRun { spec: record.spec, faulty, baseline };
    run.verify_prefix()?;
    Ok(InjectionCase { seed: record.seed, index: record.index, run, peaks: record.peaks })
}

impl Corpus {
    /// Writes one directory per case (paired traces plus a JSON record)
    /// and a manifest tying them together.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for case in &self.cases {
            let name = format!("{}-{:02}", case.run.spec.kind.label(), case.index);
            save_case(case, &dir.join(&name))?;
            entries.push(CaseEntry {
                kind: case.run.spec.kind.label().to_string(),
                index: case.index,
                dir: name,
            });
        }
        let manifest = CorpusFile {
            params: self.params,
            config_hash: config_hash.to_string(),
            cases: entries,
        };
        fs::write(
            dir.join("corpus.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, config_hash: &str) -> Result<Corpus, PipelineError> {
        let corrupt = |message: String| PipelineError::Corpus {
            dir: dir.to_path_buf(),
            message,
        };
        let manifest: CorpusFile =
            serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
        if manifest.config_hash != config_hash {
            return Err(corrupt(format!(
                "built for config {}, asked to load under {}",
                manifest.config_hash, config_hash
            )));
        }
        let mut cases = Vec::new();
        for entry in &manifest.cases {
            let case = load_case(&dir.join(&entry.dir))?;
            for trace in [&case.run.faulty, &case.run.baseline] {
                if trace.config_hash != config_hash {
                    return Err(corrupt(format!(
                        "trace in {} was simulated under config {}",
                        entry.dir, trace.config_hash
                    )));
                }
            }
            cases.push(case);
        }
        Ok(Corpus { params: manifest.params, cases })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_keys_cover_both_modes_with_stable_labels() {
        let keys = model_keys(&[0, 7], &[3]);
        let labels: Vec<String> = keys.iter().map(ModelKey::label).collect();
        assert_eq!(labels, ["truncated-L0", "truncated-L7", "non-truncated-L3"]);
    }

    #[test]
    fn desk_params_pin_the_run_shape() {
        let p = BenchParams::desk(11);
        assert_eq!(p.case_duration(), 3_810);
        assert_eq!(p.cases_per_kind, 10);
        assert_eq!((p.samples, p.permutations), (2_000, 200));
    }

    #[test]
    fn fit_policy_binds_the_battery_controller() {
        let cfg = PlantConfig::bundled();
        let policy = plant_fit_policy(&cfg);
        assert!(policy.known.contains_key(&NodeId::new(nodes::BATTERY_CONTROL)));
        assert_eq!(policy.known.len(), 1);
    }

    #[test]
    fn pooling_stacks_training_runs_in_order() {
        let mut a = Series::new(["X", "Y"]).unwrap();
        a.push_row(&[1.0, 2.0]).unwrap();
        let mut b = Series::new(["X", "Y"]).unwrap();
        b.push_row(&[3.0, 4.0]).unwrap();
        b.push_row(&[5.0, 6.0]).unwrap();
        let pooled = pooled_series(&[a, b]).unwrap();
        assert_eq!(pooled.len(), 3);
        assert_eq!(pooled.column(&NodeId::new("X")).unwrap(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn corpus_round_trips_through_a_directory() {
        let cfg = PlantConfig::bundled();
        let params = BenchParams {
            master_seed: 5,
            train_runs: 0,
            train_minutes: 0,
            cases_per_kind: 1,
            t_i: 40,
            tau: 10,
            trailing: 5,
            samples: 10,
            permutations: 5,
        };
        let corpus = Corpus {
            params,
            cases: vec![
                build_case(&cfg, &params, InjectionKind::BatteryFailure, 0).unwrap(),
                build_case(&cfg, &params, InjectionKind::SocLoss { soc: 0.69 }, 0).unwrap(),
            ],
        };
        let dir = std::env::temp_dir().join(format!("corpus-rt-{}", std::process::id()));
        let hash = cfg.hash();
        corpus.save(&dir, &hash).unwrap();
        let back = Corpus::load(&dir, &hash).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.cases.len(), 2);
        for (orig, loaded) in corpus.cases.iter().zip(&back.cases) {
            assert_eq!(orig.seed, loaded.seed);
            assert_eq!(orig.run.spec, loaded.run.spec);
            assert_eq!(orig.peaks, loaded.peaks);
            assert_eq!(orig.run.faulty.series, loaded.run.faulty.series);
            assert_eq!(orig.run.faulty.grid_noise, loaded.run.faulty.grid_noise);
        }
        assert!(Corpus::load(&dir, "other-config").is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
