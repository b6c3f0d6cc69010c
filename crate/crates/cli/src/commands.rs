//! The commands behind each subcommand. Every command resolves a manifest,
//! derives its artifact directory from the manifest hash, and skips work
//! whose outputs are already present, so rerunning a manifest is cheap and
//! reproduces the same bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rca_core::attribution::{
    attribute_event, Aggregation, AnomalyEvent, AttributionError, AttributionResult,
    CoalitionEstimator, EstimatorSettings, Strategy,
};
use rca_core::evaluation::{BenchmarkReport, EvalError};
use rca_core::graph::{Mode, NodeId};
use rca_core::heuristic::{FittedTree, HeuristicError};
use rca_core::injection::{InjectionCase, InjectionError, InjectionKind, InjectionSpec, PairedRun};
use rca_core::mechanisms::{FitError, FittedScm, MechanismError};
use rca_core::pipeline::{self, BenchParams, Corpus, ModelKey, PipelineError};
use rca_core::plant::{self, PlantConfig, PlantError, PlantTrace};
use rca_core::rng::child_seed;
use rca_core::series::SeriesError;
use serde::Serialize;

use crate::manifest::{file_hash, CommandSpec, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown injection kind {given:?}; known kinds: {known}")]
    UnknownInjection { given: String, known: String },
    #[error("unknown node {given:?}; model nodes: {known}")]
    UnknownNode { given: String, known: String },
    #[error("no scoreable step at minute {t}: {reason}")]
    PeakNotFound { t: usize, reason: String },
    #[error("artifact {path}: {message}")]
    CorruptArtifact { path: PathBuf, message: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl CliError {
    /// Stable machine-parseable code, printed as `error[<code>]: ...`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::UnknownInjection { .. } => "unknown-injection",
            CliError::UnknownNode { .. } => "unknown-node",
            CliError::PeakNotFound { .. } => "peak-not-found",
            CliError::CorruptArtifact { .. } => "corrupt-artifact",
            CliError::Plant(PlantError::InvalidConfig(_) | PlantError::Config(_)) => {
                "invalid-config"
            }
            CliError::Plant(_) => "simulation-failure",
            CliError::Injection(_) => "injection-failure",
            CliError::Fit(FitError::EmptyTraining) => "insufficient-data",
            CliError::Fit(_) => "fit-failure",
            CliError::Mechanism(_) => "model-failure",
            CliError::Attribution(AttributionError::WindowTooShort { .. }) => "peak-not-found",
            CliError::Attribution(_) => "attribution-failure",
            CliError::Heuristic(HeuristicError::InsufficientData { .. }) => "insufficient-data",
            CliError::Heuristic(HeuristicError::NoOvershootFound { .. }) => "peak-not-found",
            CliError::Heuristic(_) => "heuristic-failure",
            CliError::Series(_) => "bad-trace",
            CliError::Eval(_) => "corrupt-artifact",
            CliError::Pipeline(PipelineError::Fit(FitError::EmptyTraining)) => {
                "insufficient-data"
            }
            CliError::Pipeline(PipelineError::Corpus { .. }) => "corrupt-artifact",
            CliError::Pipeline(_) => "pipeline-failure",
            CliError::Io(_) => "io-failure",
            CliError::Json(_) => "corrupt-artifact",
            CliError::Toml(_) => "invalid-config",
        }
    }
}

/// Settings shared by every command: where artifacts go and which plant
/// configuration is in force.
pub struct Ctx {
    pub out_root: PathBuf,
    pub config_path: String,
    pub config: PlantConfig,
    pub config_hash: String,
}

impl Ctx {
    /// `--out` wins, then the `RCA_OUT` environment variable, then
    /// `./rca-out`. `--config` falls back to the bundled calibration.
    pub fn new(out: Option<PathBuf>, config: Option<PathBuf>) -> Result<Self, CliError> {
        let out_root = out
            .or_else(|| std::env::var_os("RCA_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("rca-out"));
        let (config_path, config) = match config {
            Some(path) => {
                let text = fs::read_to_string(&path)?;
                (path.display().to_string(), PlantConfig::from_toml_str(&text)?)
            }
            None => ("bundled".to_string(), PlantConfig::bundled()),
        };
        let config_hash = config.hash();
        Ok(Ctx { out_root, config_path, config, config_hash })
    }

    fn manifest(&self, spec: CommandSpec) -> RunManifest {
        RunManifest::new(
            self.out_root.display().to_string(),
            self.config_path.clone(),
            self.config_hash.clone(),
            spec,
        )
    }

    /// Create the run directory and persist the manifest. An existing
    /// manifest is left alone so reruns keep the original bytes.
    fn run_dir(&self, manifest: &RunManifest) -> Result<PathBuf, CliError> {
        let dir = self.out_root.join(manifest.dir_name());
        fs::create_dir_all(&dir)?;
        let path = dir.join("manifest.toml");
        if !path.exists() {
            manifest.save(&path)?;
        }
        Ok(dir)
    }
}

fn parse_kind(label: &str) -> Result<InjectionKind, CliError> {
    let catalog = InjectionKind::catalog();
    catalog.iter().find(|k| k.label() == label).copied().ok_or_else(|| {
        CliError::UnknownInjection {
            given: label.to_string(),
            known: catalog.iter().map(|k| k.label()).collect::<Vec<_>>().join(", "),
        }
    })
}

/// Simulate one fault-free run and write `trace.csv` (plus its noise
/// sidecar). A zero duration yields a header-only file.
pub fn cmd_simulate(
    ctx: &Ctx,
    seed: u64,
    t_start: usize,
    duration: usize,
) -> Result<PathBuf, CliError> {
    let manifest = ctx.manifest(CommandSpec::Simulate { seed, t_start, duration });
    let dir = ctx.run_dir(&manifest)?;
    let trace_path = dir.join("trace.csv");
    if trace_path.exists() {
        println!("{} (cached)", dir.display());
        return Ok(dir);
    }
    let trace = plant::simulate(&ctx.config, seed, t_start, duration)?;
    trace.save(&trace_path)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Simulate a paired faulty/baseline run with one injected fault and write
/// it as a case directory (`faulty.csv`, `baseline.csv`, `case.json`).
pub fn cmd_inject(
    ctx: &Ctx,
    seed: u64,
    kind_label: &str,
    t_i: usize,
    duration: Option<usize>,
    tau: usize,
    trailing: usize,
) -> Result<PathBuf, CliError> {
    let kind = parse_kind(kind_label)?;
    let spec = match duration {
        Some(d) => InjectionSpec::with_duration(kind, t_i, d),
        None => InjectionSpec::new(kind, t_i),
    };
    let manifest = ctx.manifest(CommandSpec::Inject {
        seed,
        kind: kind_label.to_string(),
        t_i,
        duration: spec.duration,
        tau,
        trailing,
    });
    let dir = ctx.run_dir(&manifest)?;
    let case_dir = dir.join("case");
    if case_dir.join("case.json").exists() {
        let case = pipeline::load_case(&case_dir)?;
        print_case(&dir, &case, true);
        return Ok(dir);
    }
    let run = PairedRun::simulate(&ctx.config, seed, 0, t_i + tau + trailing, spec)?;
    let peaks =
        run.attributable_peaks(ctx.config.peak_limit_kw, ctx.config.peak_min_width, tau);
    let case = InjectionCase { seed, index: 0, run, peaks };
    pipeline::save_case(&case, &case_dir)?;
    print_case(&dir, &case, false);
    Ok(dir)
}

fn print_case(dir: &Path, case: &InjectionCase, cached: bool) {
    let suffix = if cached { " (cached)" } else { "" };
    println!("{}{suffix}", dir.display());
    println!(
        "{} at minute {}, {} attributable peak(s)",
        case.run.spec.kind.label(),
        case.run.spec.t_i,
        case.peaks.len()
    );
    for peak in &case.peaks {
        println!("  peak at minute {} ({:.1} kW)", peak.t, peak.magnitude);
    }
}

/// Fit lagged models for every requested window depth, plus the walk-back
/// tree, from fresh fault-free training runs.
pub fn cmd_fit(
    ctx: &Ctx,
    seed: u64,
    train_runs: usize,
    train_minutes: usize,
    lags: &[u32],
    mode: Mode,
) -> Result<PathBuf, CliError> {
    let manifest = ctx.manifest(CommandSpec::Fit {
        seed,
        train_runs,
        train_minutes,
        lags: lags.to_vec(),
        mode: mode_label(mode).to_string(),
    });
    let dir = ctx.run_dir(&manifest)?;
    let keys: Vec<ModelKey> = lags.iter().map(|&lags| ModelKey { mode, lags }).collect();

    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir)?;
    let tree_path = dir.join("tree.json");
    let missing: Vec<ModelKey> = keys
        .iter()
        .filter(|k| !models_dir.join(format!("{}.json", k.label())).exists())
        .copied()
        .collect();
    if missing.is_empty() && tree_path.exists() {
        println!("{} (cached)", dir.display());
        return Ok(dir);
    }

    let params = BenchParams { master_seed: seed, train_runs, train_minutes, ..desk_default() };
    let traces = pipeline::training_traces(&ctx.config, &params)?;
    let train = pipeline::training_series(&traces, ctx.config.warmup_minutes);
    let models = pipeline::fit_models(&ctx.config, &missing, &train)?;
    for (key, scm) in &models {
        scm.save(&models_dir.join(format!("{}.json", key.label())))?;
    }
    if !tree_path.exists() {
        pipeline::fit_tree(&train)?.save(&tree_path)?;
    }
    println!("{}", dir.display());
    for key in &keys {
        println!("  models/{}.json", key.label());
    }
    println!("  tree.json");
    Ok(dir)
}

fn desk_default() -> BenchParams {
    BenchParams::desk(0)
}

fn mode_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Truncated => "truncated",
        Mode::NonTruncated => "non-truncated",
    }
}

fn load_model(path: &Path) -> Result<FittedScm, CliError> {
    if !path.exists() {
        return Err(CliError::CorruptArtifact {
            path: path.to_path_buf(),
            message: "model file not found; run `fit` first".into(),
        });
    }
    Ok(FittedScm::load(path)?)
}

fn load_trace(path: &Path) -> Result<PlantTrace, CliError> {
    if !path.exists() {
        return Err(CliError::CorruptArtifact {
            path: path.to_path_buf(),
            message: "trace not found; run `simulate` or `inject` first".into(),
        });
    }
    let trace = PlantTrace::load(path)?;
    Ok(trace)
}

/// Index of the absolute minute `t` within a trace, or why it cannot be
/// scored.
fn trace_index(trace: &PlantTrace, t: usize) -> Result<usize, CliError> {
    let start = trace.t_start;
    let end = start + trace.len();
    if t < start || t >= end {
        return Err(CliError::PeakNotFound {
            t,
            reason: format!("trace covers minutes [{start}, {end})"),
        });
    }
    Ok(t - start)
}

fn window_too_short(t: usize, err: AttributionError) -> CliError {
    match err {
        AttributionError::WindowTooShort { need, .. } => CliError::PeakNotFound {
            t,
            reason: format!("scoring needs {need} minutes of history before it"),
        },
        other => other.into(),
    }
}

/// Score one step of a trace against a fitted model and write the full
/// per-(node, lag) attribution.
#[allow(clippy::too_many_arguments)]
pub fn cmd_attribute(
    ctx: &Ctx,
    model_path: &Path,
    trace_path: &Path,
    t: usize,
    agg: Aggregation,
    seed: u64,
    samples: usize,
    permutations: usize,
) -> Result<PathBuf, CliError> {
    let scm = load_model(model_path)?;
    let trace = load_trace(trace_path)?;
    let manifest = ctx.manifest(CommandSpec::Attribute {
        model_hash: file_hash(model_path)?,
        trace_hash: file_hash(trace_path)?,
        t,
        agg: agg_label(agg).to_string(),
        seed,
        samples,
        permutations,
    });
    let dir = ctx.run_dir(&manifest)?;
    let out_path = dir.join("attribution.json");

    let result: AttributionResult = if out_path.exists() {
        serde_json::from_str(&fs::read_to_string(&out_path)?)?
    } else {
        let idx = trace_index(&trace, t)?;
        let event = AnomalyEvent::from_series(&scm, &trace.series, idx)
            .map_err(|e| window_too_short(t, e))?;
        let settings = EstimatorSettings {
            samples,
            strategy: Strategy::Permutations { count: permutations },
            seed: child_seed(seed, "attribute"),
            exact_cap: 12,
        };
        let result = attribute_event(&scm, &event, settings)?;
        fs::write(&out_path, serde_json::to_string_pretty(&result)?)?;
        result
    };

    println!("{}", dir.display());
    println!(
        "target {} = {:.1} at minute {t}, anomaly score {:.2}, surprise {:.3}",
        result.target, result.target_observed, result.score, result.it_score
    );
    println!("{:<16} {:>10}", "node", agg_label(agg));
    for (node, phi) in rca_core::attribution::aggregate(&result, agg) {
        println!("{:<16} {:>10.4}", node.as_str(), phi);
    }
    Ok(dir)
}

fn agg_label(agg: Aggregation) -> &'static str {
    match agg {
        Aggregation::Max => "max",
        Aggregation::Sum => "sum",
    }
}

/// Per-noise-term breakdown at one step: each contribution next to the
/// noise value that produced it and the quartile band it usually stays in.
#[allow(clippy::too_many_arguments)]
pub fn cmd_explain(
    ctx: &Ctx,
    model_path: &Path,
    trace_path: &Path,
    t: usize,
    nodes: &[String],
    seed: u64,
    samples: usize,
    permutations: usize,
) -> Result<PathBuf, CliError> {
    let scm = load_model(model_path)?;
    let trace = load_trace(trace_path)?;
    let known: BTreeSet<&str> =
        scm.graph().instances().iter().map(|i| i.node.as_str()).collect();
    for name in nodes {
        if !known.contains(name.as_str()) {
            return Err(CliError::UnknownNode {
                given: name.clone(),
                known: known.iter().copied().collect::<Vec<_>>().join(", "),
            });
        }
    }
    let manifest = ctx.manifest(CommandSpec::Explain {
        model_hash: file_hash(model_path)?,
        trace_hash: file_hash(trace_path)?,
        t,
        nodes: nodes.to_vec(),
        seed,
        samples,
        permutations,
    });
    let dir = ctx.run_dir(&manifest)?;

    let idx = trace_index(&trace, t)?;
    let event = AnomalyEvent::from_series(&scm, &trace.series, idx)
        .map_err(|e| window_too_short(t, e))?;
    let settings = EstimatorSettings {
        samples,
        strategy: Strategy::Permutations { count: permutations },
        seed: child_seed(seed, "explain"),
        exact_cap: 12,
    };
    let mut estimator = CoalitionEstimator::new(&scm, &event, settings)?;
    let observed: Vec<f64> =
        (0..estimator.players().len()).map(|i| estimator.observed_noise(i)).collect();
    let result = estimator.shapley()?;

    let mut rows = Vec::new();
    for ((inst, phi), u) in result.contributions.iter().zip(&observed) {
        if !nodes.is_empty() && !nodes.iter().any(|n| n == inst.node.as_str()) {
            continue;
        }
        let (q25, q75) = scm
            .model_for(inst)
            .and_then(|m| m.noise)
            .map(|idx| scm.noise_model(idx).quartiles())
            .unwrap_or((f64::NAN, f64::NAN));
        rows.push(ExplainRow {
            node: inst.node.clone(),
            lag: inst.lag,
            phi: *phi,
            noise: *u,
            q25,
            q75,
        });
    }
    let report = ExplainReport {
        t,
        target: result.target.clone(),
        target_observed: result.target_observed,
        score: result.score,
        it_score: result.it_score,
        rows,
    };
    fs::write(dir.join("explain.json"), serde_json::to_string_pretty(&report)?)?;

    println!("{}", dir.display());
    println!(
        "target {} = {:.1} at minute {t}, anomaly score {:.2}, surprise {:.3}",
        report.target, report.target_observed, report.score, report.it_score
    );
    println!(
        "{:<16} {:>4} {:>10} {:>10} {:>10} {:>10}",
        "node", "lag", "phi", "noise", "q25", "q75"
    );
    for row in &report.rows {
        // Flag noise values outside the training interquartile band.
        let mark = if row.noise < row.q25 || row.noise > row.q75 { " *" } else { "" };
        println!(
            "{:<16} {:>4} {:>10.4} {:>10.3} {:>10.3} {:>10.3}{mark}",
            row.node.as_str(),
            row.lag,
            row.phi,
            row.noise,
            row.q25,
            row.q75
        );
    }
    Ok(dir)
}

#[derive(Serialize)]
struct ExplainRow {
    node: NodeId,
    lag: u32,
    phi: f64,
    noise: f64,
    q25: f64,
    q75: f64,
}

#[derive(Serialize)]
struct ExplainReport {
    t: usize,
    target: NodeId,
    target_observed: f64,
    score: f64,
    it_score: f64,
    rows: Vec<ExplainRow>,
}

/// Full benchmark: train, build the fault corpus, score every peak, render
/// the report. Each stage's artifacts are reused when already on disk.
pub fn cmd_bench(
    ctx: &Ctx,
    truncated: &[u32],
    non_truncated: &[u32],
    heuristic: bool,
    params: BenchParams,
) -> Result<PathBuf, CliError> {
    let manifest = ctx.manifest(CommandSpec::Bench {
        truncated: truncated.to_vec(),
        non_truncated: non_truncated.to_vec(),
        heuristic,
        params,
    });
    let dir = ctx.run_dir(&manifest)?;
    let keys = pipeline::model_keys(truncated, non_truncated);

    // Training data is simulated lazily: only when a model or the tree is
    // actually missing.
    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir)?;
    let tree_path = dir.join("tree.json");
    let mut train: Option<Vec<rca_core::Series>> = None;
    let ensure_train = |train: &mut Option<Vec<rca_core::Series>>| -> Result<(), CliError> {
        if train.is_none() {
            eprintln!("training: {} runs x {} minutes", params.train_runs, params.train_minutes);
            let traces = pipeline::training_traces(&ctx.config, &params)?;
            *train = Some(pipeline::training_series(&traces, ctx.config.warmup_minutes));
        }
        Ok(())
    };

    let mut models = Vec::new();
    for key in &keys {
        let path = models_dir.join(format!("{}.json", key.label()));
        if path.exists() {
            eprintln!("model {}: cached", key.label());
            models.push((*key, FittedScm::load(&path)?));
        } else {
            ensure_train(&mut train)?;
            let fitted =
                pipeline::fit_models(&ctx.config, &[*key], train.as_deref().unwrap())?;
            for (key, scm) in fitted {
                eprintln!("model {}: fitted", key.label());
                scm.save(&path)?;
                models.push((key, scm));
            }
        }
    }
    let tree = if heuristic {
        if tree_path.exists() {
            eprintln!("tree: cached");
            Some(FittedTree::load(&tree_path)?)
        } else {
            ensure_train(&mut train)?;
            let tree = pipeline::fit_tree(train.as_deref().unwrap())?;
            tree.save(&tree_path)?;
            eprintln!("tree: fitted");
            Some(tree)
        }
    } else {
        None
    };

    let corpus_dir = dir.join("corpus");
    let corpus = if corpus_dir.join("corpus.json").exists() {
        let corpus = Corpus::load(&corpus_dir, &ctx.config_hash)?;
        if corpus.params != params {
            return Err(CliError::CorruptArtifact {
                path: corpus_dir,
                message: "stored corpus was built with different settings".into(),
            });
        }
        eprintln!("corpus: cached ({} cases)", corpus.cases.len());
        corpus
    } else {
        let corpus = pipeline::build_corpus(&ctx.config, &params)?;
        corpus.save(&corpus_dir, &ctx.config_hash)?;
        eprintln!("corpus: built ({} cases)", corpus.cases.len());
        corpus
    };

    let rows_path = dir.join("rows.csv");
    let report = if rows_path.exists() {
        eprintln!("scores: cached");
        BenchmarkReport::from_csv_str(&fs::read_to_string(&rows_path)?)?
    } else {
        let peaks: usize = corpus.cases.iter().map(|c| c.peaks.len()).sum();
        eprintln!(
            "scoring: {} peaks x {} models{}",
            peaks,
            models.len(),
            if tree.is_some() { " + heuristic" } else { "" }
        );
        let report = pipeline::score_corpus(&corpus, &models, tree.as_ref(), &ctx.config)?;
        fs::write(&rows_path, report.to_csv_string())?;
        report
    };

    write_report_files(&dir, &manifest.hash(), &ctx.config_hash, &report, &[1, 3, 5], 10)?;
    println!("{}", dir.display());
    Ok(dir)
}

/// Render tables and plot data from an existing benchmark row file.
pub fn cmd_report(
    ctx: &Ctx,
    rows_path: &Path,
    ks: &[usize],
    max_delay: i64,
) -> Result<PathBuf, CliError> {
    if !rows_path.exists() {
        return Err(CliError::CorruptArtifact {
            path: rows_path.to_path_buf(),
            message: "row file not found; run `bench` first".into(),
        });
    }
    let report = BenchmarkReport::from_csv_str(&fs::read_to_string(rows_path)?)?;
    let manifest = ctx.manifest(CommandSpec::Report {
        rows_hash: file_hash(rows_path)?,
        ks: ks.to_vec(),
        max_delay,
    });
    let dir = ctx.run_dir(&manifest)?;
    write_report_files(&dir, &manifest.hash(), &ctx.config_hash, &report, ks, max_delay)?;
    println!("{}", dir.display());
    print!("{}", fs::read_to_string(dir.join("report.txt"))?);
    Ok(dir)
}

/// Write `report.txt` plus the plot-ready CSVs under `plots/`. Shared by
/// `bench` and `report` so both produce identical bytes for the same rows.
fn write_report_files(
    dir: &Path,
    manifest_hash: &str,
    config_hash: &str,
    report: &BenchmarkReport,
    ks: &[usize],
    max_delay: i64,
) -> Result<(), CliError> {
    let mut text = String::new();
    let _ = writeln!(text, "manifest {manifest_hash}");
    let _ = writeln!(text, "config {config_hash}");
    let _ = writeln!(text, "rows {}", report.rows.len());
    text.push('\n');
    text.push_str(&report.hit_table(ks));
    text.push('\n');
    text.push_str(&report.d_table(max_delay));
    fs::write(dir.join("report.txt"), text)?;

    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    fs::write(plots.join("hit_rate_vs_lags.csv"), hit_curves_csv(report, ks))?;
    fs::write(plots.join("d_quantiles.csv"), d_quantiles_csv(report, max_delay))?;
    Ok(())
}

/// Split a model label like `truncated-L7` into its mode and window depth.
fn parse_model_label(label: &str) -> Option<(&str, u32)> {
    for mode in ["truncated", "non-truncated"] {
        if let Some(rest) = label.strip_prefix(mode) {
            if let Some(lags) = rest.strip_prefix("-L") {
                if let Ok(lags) = lags.parse() {
                    return Some((mode, lags));
                }
            }
        }
    }
    None
}

/// Hit rate per window depth, one row per (k, mode, agg, lags): the data
/// behind a hit-rate-versus-window-size curve. Scorers without a window
/// (the heuristic) land in rows with an empty `lags` field.
fn hit_curves_csv(report: &BenchmarkReport, ks: &[usize]) -> String {
    let mut out = String::from("k,mode,agg,lags,hit_rate\n");
    for &k in ks {
        for (model, agg) in report.scorers() {
            let Ok(rate) = report.hit_rate(&model, &agg, None, k) else { continue };
            match parse_model_label(&model) {
                Some((mode, lags)) => {
                    let _ = writeln!(out, "{k},{mode},{agg},{lags},{rate}");
                }
                None => {
                    let _ = writeln!(out, "{k},{model},{agg},,{rate}");
                }
            }
        }
    }
    out
}

/// Box-plot quantiles of the localization offset per scorer, for all peaks
/// and for the fast subset that peaks within `max_delay` minutes.
fn d_quantiles_csv(report: &BenchmarkReport, max_delay: i64) -> String {
    let mut out = String::from("model,agg,subset,count,mean,min,q25,median,q75,max\n");
    for (model, agg) in report.scorers() {
        for (subset, cap) in [("all", None), ("fast", Some(max_delay))] {
            let Some(s) = report.d_stats(&model, &agg, cap) else { continue };
            let _ = writeln!(
                out,
                "{model},{agg},{subset},{},{},{},{},{},{},{}",
                s.count, s.mean, s.min, s.q25, s.median, s.q75, s.max
            );
        }
    }
    out
}
