//! Mechanisms and noise models for unfolded graphs, plus fitting.
//!
//! Every window instance of a summary node shares one mechanism and one
//! noise model by default (mechanisms are assumed time-invariant). Dangling
//! instances in non-truncated mode get their own refitted mechanisms over
//! whatever dangling parents survive, root-like when none do.
//!
//! Model files are JSON with an explicit `format_version`; loading validates
//! the version and that the stored mechanisms are consistent with the stored
//! graph.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{battery_mode, BatteryControlParams, BatteryMode};
use crate::graph::{Instance, Mode, NodeId, SummaryGraph, UnfoldedGraph};
use crate::rng::child_rng;
use crate::series::{Series, SeriesError};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Internal master seed for the deterministic residual reservoir.
const RESERVOIR_SEED: u64 = 0x7263_615f_6669_7421;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("no training traces given")]
    EmptyTraining,
    #[error("training trace is missing column {0}")]
    MissingColumn(NodeId),
    #[error("{node}: {rows} usable rows, need at least {need}")]
    InsufficientData { node: NodeId, rows: usize, need: usize },
    #[error("regression for {0} is singular even with ridge fallback")]
    SingularRegression(NodeId),
    #[error("control mechanism on {node} requires parent {parent} lag {lag}")]
    MissingControlParent { node: NodeId, parent: NodeId, lag: u32 },
    #[error(transparent)]
    Series(#[from] SeriesError),
}

#[derive(Debug, thiserror::Error)]
pub enum MechanismError {
    #[error("{0} has a deterministic mechanism; its noise cannot be inverted")]
    NotInvertible(NodeId),
    #[error("missing noise value for {0}")]
    MissingNoise(Instance),
    #[error("missing conditioned value for dangling instance {0}")]
    MissingDanglingValue(Instance),
    #[error("mechanism for {instance} expects {want} parent values, got {got}")]
    ParentShape { instance: Instance, want: usize, got: usize },
    #[error("model is inconsistent with its graph: {0}")]
    ModelShape(String),
    #[error("model file has format version {got}, this build reads {want}")]
    UnsupportedVersion { got: u32, want: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Distribution of one node's additive noise term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    Gaussian { mean: f64, std: f64 },
    /// Residual sample, sorted ascending. Draws pick a sample uniformly.
    Empirical { samples: Vec<f64> },
}

impl NoiseModel {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            NoiseModel::Gaussian { mean, std } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean + std * z
            }
            NoiseModel::Empirical { samples } => samples[rng.gen_range(0..samples.len())],
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            NoiseModel::Gaussian { mean, .. } => *mean,
            NoiseModel::Empirical { samples } => {
                samples.iter().sum::<f64>() / samples.len() as f64
            }
        }
    }

    /// Lower and upper quartile.
    pub fn quartiles(&self) -> (f64, f64) {
        match self {
            NoiseModel::Gaussian { mean, std } => {
                // z at the 75th percentile of the standard normal.
                const Z75: f64 = 0.674_489_750_196_081_7;
                (mean - Z75 * std, mean + Z75 * std)
            }
            NoiseModel::Empirical { samples } => {
                (empirical_quantile(samples, 0.25), empirical_quantile(samples, 0.75))
            }
        }
    }
}

/// Linear-interpolated quantile of a sorted sample.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Known deterministic rule a node can be bound to instead of a regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ControlSpec {
    /// Two-point battery controller: reads the driven draw node at lags 1
    /// and 2, a state-of-charge node at lag 1 and its own previous output.
    BatteryTwoPoint { draw: NodeId, soc: NodeId, params: BatteryControlParams },
}

/// Control rule with parent positions resolved against a parent list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum BoundControl {
    BatteryTwoPoint {
        params: BatteryControlParams,
        draw_recent: usize,
        draw_older: usize,
        soc: usize,
        prev: usize,
    },
}

impl BoundControl {
    fn evaluate(&self, parents: &[f64]) -> f64 {
        match self {
            BoundControl::BatteryTwoPoint { params, draw_recent, draw_older, soc, prev } => {
                let avg = 0.5 * (parents[*draw_recent] + parents[*draw_older]);
                battery_mode(params, avg, parents[*soc], BatteryMode::from_signal(parents[*prev]))
                    .signal()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MechanismKind {
    /// No parents: value is the fitted mean plus noise.
    Root { mean: f64 },
    /// Additive linear: intercept + coefficients . parents + noise.
    /// Coefficients align with the model's parent list.
    Linear { intercept: f64, coefficients: Vec<f64> },
    /// Known deterministic rule; carries no noise term.
    Control(BoundControl),
}

impl MechanismKind {
    /// Deterministic part given parent values in parent order.
    pub fn deterministic(&self, parents: &[f64]) -> f64 {
        match self {
            MechanismKind::Root { mean } => {
                debug_assert!(parents.is_empty());
                *mean
            }
            MechanismKind::Linear { intercept, coefficients } => {
                debug_assert_eq!(parents.len(), coefficients.len());
                let mut acc = *intercept;
                for (c, p) in coefficients.iter().zip(parents) {
                    acc += c * p;
                }
                acc
            }
            MechanismKind::Control(rule) => rule.evaluate(parents),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    /// Rows that entered the regression.
    pub rows: usize,
    pub residual_std: f64,
    /// True when the plain normal equations were singular and the ridge
    /// fallback produced the coefficients.
    pub ridge: bool,
}

/// Mechanism of one node (or one node instance), with parents given as
/// `(node, lag)` relative to the node's own time step, sorted by name then
/// lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub parents: Vec<(NodeId, u32)>,
    pub kind: MechanismKind,
    /// Index into the model's noise table; `None` for control mechanisms.
    pub noise: Option<usize>,
    pub meta: FitMeta,
}

impl NodeModel {
    /// Deterministic part of the mechanism given parent values in parent
    /// order.
    pub fn deterministic(&self, parents: &[f64]) -> f64 {
        self.kind.deterministic(parents)
    }

    pub fn is_control(&self) -> bool {
        matches!(self.kind, MechanismKind::Control(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Empirical,
    Gaussian,
}

/// How mechanisms are assigned and fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPolicy {
    pub noise: NoiseKind,
    /// Fit one mechanism per window (node, lag) instance instead of sharing
    /// across lags. Mechanisms are time-invariant, so this changes sharing
    /// (and noise-model identity), not the fitted numbers.
    pub per_instance: bool,
    /// Nodes bound to known deterministic rules instead of regressions.
    pub known: BTreeMap<NodeId, ControlSpec>,
    /// Cap on stored empirical residuals; larger sets are reservoir-sampled
    /// down deterministically.
    pub residual_cap: usize,
    /// Minimum usable rows for an empirical noise model.
    pub min_rows_empirical: usize,
    /// Ridge strength (relative to the mean diagonal of the Gram matrix)
    /// used only when the plain normal equations are singular.
    pub ridge: f64,
}

impl Default for FitPolicy {
    fn default() -> Self {
        FitPolicy {
            noise: NoiseKind::Empirical,
            per_instance: false,
            known: BTreeMap::new(),
            residual_cap: 20_000,
            min_rows_empirical: 30,
            ridge: 1e-6,
        }
    }
}

/// Per-node statistics of the training data, kept for anomaly scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub mean: f64,
    pub std: f64,
}

/// Instance-keyed maps serialize as pair lists; JSON object keys must be
/// strings.
mod instance_model_pairs {
    use super::{BTreeMap, Instance, NodeModel};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<Instance, NodeModel>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<Instance, NodeModel>, D::Error> {
        let pairs: Vec<(Instance, NodeModel)> = Vec::deserialize(d)?;
        Ok(pairs.into_iter().collect())
    }
}

/// A fully specified model over an unfolded graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedScm {
    pub format_version: u32,
    graph: UnfoldedGraph,
    /// Mechanism per summary node, shared by its window instances (unless
    /// overridden in `instance_models`).
    summary_models: BTreeMap<NodeId, NodeModel>,
    /// Per-instance mechanisms: dangling refits in non-truncated mode and,
    /// with `per_instance` fitting, every window instance.
    #[serde(with = "instance_model_pairs")]
    instance_models: BTreeMap<Instance, NodeModel>,
    noise_table: Vec<NoiseModel>,
    train_stats: BTreeMap<NodeId, TrainStats>,
    policy: FitPolicy,
}

impl FittedScm {
    /// Build a model from parts and validate it against the graph. Noise
    /// indices in the given models must point into `noise_table`.
    pub fn assemble(
        graph: UnfoldedGraph,
        summary_models: BTreeMap<NodeId, NodeModel>,
        instance_models: BTreeMap<Instance, NodeModel>,
        noise_table: Vec<NoiseModel>,
        train_stats: BTreeMap<NodeId, TrainStats>,
        policy: FitPolicy,
    ) -> Result<Self, MechanismError> {
        let scm = FittedScm {
            format_version: MODEL_FORMAT_VERSION,
            graph,
            summary_models,
            instance_models,
            noise_table,
            train_stats,
            policy,
        };
        scm.validate()?;
        Ok(scm)
    }

    fn validate(&self) -> Result<(), MechanismError> {
        let shape = |msg: String| Err(MechanismError::ModelShape(msg));
        for inst in self.graph.window() {
            let Some(model) = self.model_for(inst) else {
                return shape(format!("window instance {inst} has no mechanism"));
            };
            let want: Vec<(NodeId, u32)> = self
                .graph
                .summary()
                .parents(&inst.node)
                .to_vec();
            if model.parents != want {
                return shape(format!("mechanism for {inst} disagrees with graph parents"));
            }
            self.check_model(inst, model)?;
        }
        for inst in self.graph.dangling() {
            match self.graph.mode() {
                Mode::Truncated => {
                    if self.instance_models.contains_key(inst) {
                        return shape(format!(
                            "truncated model must not carry a mechanism for dangling {inst}"
                        ));
                    }
                }
                Mode::NonTruncated => {
                    let Some(model) = self.instance_models.get(inst) else {
                        return shape(format!("dangling instance {inst} has no refit mechanism"));
                    };
                    let want: Vec<(NodeId, u32)> = self
                        .graph
                        .parent_instances(inst)
                        .into_iter()
                        .map(|p| (p.node, p.lag - inst.lag))
                        .collect();
                    if model.parents != want {
                        return shape(format!(
                            "refit mechanism for {inst} disagrees with surviving parents"
                        ));
                    }
                    if model.noise.is_none() {
                        return shape(format!("dangling instance {inst} must carry noise"));
                    }
                    self.check_model(inst, model)?;
                }
            }
        }
        Ok(())
    }

    fn check_model(&self, inst: &Instance, model: &NodeModel) -> Result<(), MechanismError> {
        if let MechanismKind::Linear { coefficients, .. } = &model.kind {
            if coefficients.len() != model.parents.len() {
                return Err(MechanismError::ModelShape(format!(
                    "{inst}: {} coefficients for {} parents",
                    coefficients.len(),
                    model.parents.len()
                )));
            }
        }
        if model.is_control() != model.noise.is_none() {
            return Err(MechanismError::ModelShape(format!(
                "{inst}: exactly the control mechanisms carry no noise"
            )));
        }
        if let Some(idx) = model.noise {
            if idx >= self.noise_table.len() {
                return Err(MechanismError::ModelShape(format!(
                    "{inst}: noise index {idx} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> &UnfoldedGraph {
        &self.graph
    }

    pub fn policy(&self) -> &FitPolicy {
        &self.policy
    }

    pub fn train_stats(&self, node: &NodeId) -> Option<TrainStats> {
        self.train_stats.get(node).copied()
    }

    pub fn noise_model(&self, idx: usize) -> &NoiseModel {
        &self.noise_table[idx]
    }

    /// Mechanism for an instance; `None` means the instance is conditioned
    /// on its observed value (dangling in truncated mode).
    pub fn model_for(&self, inst: &Instance) -> Option<&NodeModel> {
        if let Some(m) = self.instance_models.get(inst) {
            return Some(m);
        }
        if self.graph.is_dangling(inst) {
            return None;
        }
        self.summary_models.get(&inst.node)
    }

    /// Instances whose noise can be attributed, sorted by (name, lag).
    pub fn attributable(&self) -> Vec<Instance> {
        let mut out: Vec<Instance> = self
            .graph
            .instances()
            .iter()
            .filter(|inst| self.model_for(inst).is_some_and(|m| m.noise.is_some()))
            .cloned()
            .collect();
        out.sort();
        out
    }

    /// Per-node attributable lags, ascending.
    pub fn attributable_lags(&self, node: &NodeId) -> Vec<u32> {
        let mut lags: Vec<u32> = self
            .attributable()
            .into_iter()
            .filter(|i| &i.node == node)
            .map(|i| i.lag)
            .collect();
        lags.sort_unstable();
        lags
    }

    /// Observed value minus the deterministic part; the realized noise.
    pub fn invert_noise(
        &self,
        inst: &Instance,
        observed: f64,
        parents: &[f64],
    ) -> Result<f64, MechanismError> {
        let model = self
            .model_for(inst)
            .ok_or_else(|| MechanismError::MissingNoise(inst.clone()))?;
        if model.is_control() {
            return Err(MechanismError::NotInvertible(inst.node.clone()));
        }
        if parents.len() != model.parents.len() {
            return Err(MechanismError::ParentShape {
                instance: inst.clone(),
                want: model.parents.len(),
                got: parents.len(),
            });
        }
        Ok(observed - model.deterministic(parents))
    }

    /// Mechanism output for given parent values and noise.
    pub fn evaluate(
        &self,
        inst: &Instance,
        parents: &[f64],
        noise: f64,
    ) -> Result<f64, MechanismError> {
        let model = self
            .model_for(inst)
            .ok_or_else(|| MechanismError::MissingDanglingValue(inst.clone()))?;
        if parents.len() != model.parents.len() {
            return Err(MechanismError::ParentShape {
                instance: inst.clone(),
                want: model.parents.len(),
                got: parents.len(),
            });
        }
        let det = model.deterministic(parents);
        Ok(if model.is_control() { det } else { det + noise })
    }

    /// Draw `n` noise values for an instance.
    pub fn sample_noise(
        &self,
        inst: &Instance,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, MechanismError> {
        let model = self
            .model_for(inst)
            .ok_or_else(|| MechanismError::MissingNoise(inst.clone()))?;
        let idx = model.noise.ok_or_else(|| MechanismError::MissingNoise(inst.clone()))?;
        let noise = &self.noise_table[idx];
        Ok((0..n).map(|_| noise.sample(rng)).collect())
    }

    /// Evaluate the whole unfolded model with every noise term fixed.
    ///
    /// `noises` must cover every noise-bearing instance; `conditioned` must
    /// cover dangling instances in truncated mode. Returns the target value
    /// at the anchor time.
    pub fn propagate(
        &self,
        noises: &BTreeMap<Instance, f64>,
        conditioned: &BTreeMap<Instance, f64>,
    ) -> Result<f64, MechanismError> {
        let insts = self.graph.instances();
        let mut values = vec![f64::NAN; insts.len()];
        for &idx in self.graph.topological_order() {
            let inst = &insts[idx];
            let value = match self.model_for(inst) {
                None => *conditioned
                    .get(inst)
                    .ok_or_else(|| MechanismError::MissingDanglingValue(inst.clone()))?,
                Some(model) => {
                    let parent_vals: Vec<f64> =
                        self.graph.parent_indices(idx).iter().map(|&p| values[p]).collect();
                    let noise = match model.noise {
                        None => 0.0,
                        Some(_) => *noises
                            .get(inst)
                            .ok_or_else(|| MechanismError::MissingNoise(inst.clone()))?,
                    };
                    let det = model.deterministic(&parent_vals);
                    if model.is_control() {
                        det
                    } else {
                        det + noise
                    }
                }
            };
            values[idx] = value;
        }
        let target_idx = self
            .graph
            .instance_index(&self.graph.target_instance())
            .expect("target instance is in the window");
        Ok(values[target_idx])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), MechanismError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_json().as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, MechanismError> {
        let scm: FittedScm = serde_json::from_reader(reader)?;
        if scm.format_version != MODEL_FORMAT_VERSION {
            return Err(MechanismError::UnsupportedVersion {
                got: scm.format_version,
                want: MODEL_FORMAT_VERSION,
            });
        }
        scm.validate()?;
        Ok(scm)
    }

    pub fn load(path: &Path) -> Result<Self, MechanismError> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}

// ---- fitting ----------------------------------------------------------

/// Fit mechanisms and noise models for `graph` on training traces.
pub fn fit(
    graph: &UnfoldedGraph,
    traces: &[&Series],
    policy: &FitPolicy,
) -> Result<FittedScm, FitError> {
    if traces.is_empty() {
        return Err(FitError::EmptyTraining);
    }
    for node in graph.summary().nodes() {
        for trace in traces {
            if !trace.has_column(node) {
                return Err(FitError::MissingColumn(node.clone()));
            }
        }
    }

    let mut noise_table: Vec<NoiseModel> = Vec::new();
    let mut summary_models: BTreeMap<NodeId, NodeModel> = BTreeMap::new();
    let mut instance_models: BTreeMap<Instance, NodeModel> = BTreeMap::new();

    // `use_known = false` for dangling refits: their restricted parent sets
    // cannot feed a control rule, they always get a regression plus noise.
    let fit_one = |node: &NodeId,
                       parents: &[(NodeId, u32)],
                       use_known: bool,
                       noise_table: &mut Vec<NoiseModel>|
     -> Result<NodeModel, FitError> {
        if use_known {
            if let Some(spec) = policy.known.get(node) {
                let rule = bind_control(node, parents, spec)?;
                return Ok(NodeModel {
                    parents: parents.to_vec(),
                    kind: MechanismKind::Control(rule),
                    noise: None,
                    meta: FitMeta::default(),
                });
            }
        }
        let (kind, residuals, meta) = regress(node, parents, traces, policy)?;
        let noise = build_noise(node, residuals, policy)?;
        noise_table.push(noise);
        Ok(NodeModel {
            parents: parents.to_vec(),
            kind,
            noise: Some(noise_table.len() - 1),
            meta,
        })
    };

    for node in graph.summary().nodes() {
        let parents = graph.summary().parents(node).to_vec();
        if policy.per_instance && !policy.known.contains_key(node) {
            for lag in 0..=graph.max_lag() {
                let model = fit_one(node, &parents, true, &mut noise_table)?;
                instance_models.insert(Instance::new(node.clone(), lag), model);
            }
        } else {
            let model = fit_one(node, &parents, true, &mut noise_table)?;
            summary_models.insert(node.clone(), model);
        }
    }

    if graph.mode() == Mode::NonTruncated {
        for inst in graph.dangling() {
            let parents: Vec<(NodeId, u32)> = graph
                .parent_instances(inst)
                .into_iter()
                .map(|p| (p.node, p.lag - inst.lag))
                .collect();
            let model = fit_one(&inst.node, &parents, false, &mut noise_table)?;
            instance_models.insert(inst.clone(), model);
        }
    }

    let mut train_stats = BTreeMap::new();
    for node in graph.summary().nodes() {
        let (mean, std) = column_stats(node, traces)?;
        train_stats.insert(node.clone(), TrainStats { mean, std });
    }

    Ok(FittedScm::assemble(
        graph.clone(),
        summary_models,
        instance_models,
        noise_table,
        train_stats,
        policy.clone(),
    )
    .expect("freshly fitted model validates against its graph"))
}

fn bind_control(
    node: &NodeId,
    parents: &[(NodeId, u32)],
    spec: &ControlSpec,
) -> Result<BoundControl, FitError> {
    let find = |want: &NodeId, lag: u32| -> Result<usize, FitError> {
        parents
            .iter()
            .position(|(n, l)| n == want && *l == lag)
            .ok_or_else(|| FitError::MissingControlParent {
                node: node.clone(),
                parent: want.clone(),
                lag,
            })
    };
    match spec {
        ControlSpec::BatteryTwoPoint { draw, soc, params } => Ok(BoundControl::BatteryTwoPoint {
            params: *params,
            draw_recent: find(draw, 1)?,
            draw_older: find(draw, 2)?,
            soc: find(soc, 1)?,
            prev: find(node, 1)?,
        }),
    }
}

/// Least squares of `node` on its relative-lag parents over all traces.
/// Returns the mechanism, the residuals and fit metadata.
fn regress(
    node: &NodeId,
    parents: &[(NodeId, u32)],
    traces: &[&Series],
    policy: &FitPolicy,
) -> Result<(MechanismKind, Vec<f64>, FitMeta), FitError> {
    let max_lag = parents.iter().map(|(_, l)| *l).max().unwrap_or(0) as usize;
    let p = parents.len();

    let mut rows = 0usize;
    if p == 0 {
        let mut sum = 0.0;
        for trace in traces {
            let col = trace.column(node)?;
            sum += col.iter().sum::<f64>();
            rows += col.len();
        }
        if rows < 2 {
            return Err(FitError::InsufficientData { node: node.clone(), rows, need: 2 });
        }
        let mean = sum / rows as f64;
        let mut residuals = Vec::with_capacity(rows);
        for trace in traces {
            for &v in trace.column(node)? {
                residuals.push(v - mean);
            }
        }
        let std = sample_std(&residuals);
        return Ok((
            MechanismKind::Root { mean },
            residuals,
            FitMeta { rows, residual_std: std, ridge: false },
        ));
    }

    // Streaming normal equations over [1, x_1..x_p].
    let dim = p + 1;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut moment = nalgebra::DVector::<f64>::zeros(dim);
    let mut row = vec![0.0f64; dim];
    for trace in traces {
        let y_col = trace.column(node)?;
        let x_cols: Vec<&[f64]> =
            parents.iter().map(|(n, _)| trace.column(n)).collect::<Result<_, _>>()?;
        for t in max_lag..y_col.len() {
            row[0] = 1.0;
            for (k, (_, lag)) in parents.iter().enumerate() {
                row[k + 1] = x_cols[k][t - *lag as usize];
            }
            let y = y_col[t];
            for i in 0..dim {
                for j in i..dim {
                    gram[(i, j)] += row[i] * row[j];
                }
                moment[i] += row[i] * y;
            }
            rows += 1;
        }
    }
    if rows < p + 2 {
        return Err(FitError::InsufficientData { node: node.clone(), rows, need: p + 2 });
    }
    for i in 0..dim {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let scale = gram.diagonal().mean().max(f64::MIN_POSITIVE);
    // A Cholesky pass can "succeed" on a numerically singular Gram matrix
    // with a tiny positive pivot, so treat pivots far below the matrix scale
    // as rank deficiency too.
    let well_conditioned = |ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = ch.l_dirty();
        (0..dim).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * scale)
    };
    let direct = gram.clone().cholesky().filter(well_conditioned);
    let (beta, ridge) = match direct {
        Some(ch) => (ch.solve(&moment), false),
        None => {
            let mut ridged = gram;
            for i in 0..dim {
                ridged[(i, i)] += policy.ridge * scale;
            }
            match ridged.cholesky() {
                Some(ch) => (ch.solve(&moment), true),
                None => return Err(FitError::SingularRegression(node.clone())),
            }
        }
    };

    let intercept = beta[0];
    let coefficients: Vec<f64> = (0..p).map(|k| beta[k + 1]).collect();

    // Second pass: residuals.
    let mut residuals = Vec::with_capacity(rows);
    for trace in traces {
        let y_col = trace.column(node)?;
        let x_cols: Vec<&[f64]> =
            parents.iter().map(|(n, _)| trace.column(n)).collect::<Result<_, _>>()?;
        for t in max_lag..y_col.len() {
            let mut pred = intercept;
            for (k, (_, lag)) in parents.iter().enumerate() {
                pred += coefficients[k] * x_cols[k][t - *lag as usize];
            }
            residuals.push(y_col[t] - pred);
        }
    }
    let residual_std = sample_std(&residuals);

    Ok((
        MechanismKind::Linear { intercept, coefficients },
        residuals,
        FitMeta { rows, residual_std, ridge },
    ))
}

fn build_noise(
    node: &NodeId,
    mut residuals: Vec<f64>,
    policy: &FitPolicy,
) -> Result<NoiseModel, FitError> {
    match policy.noise {
        NoiseKind::Gaussian => {
            let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
            let std = sample_std(&residuals);
            Ok(NoiseModel::Gaussian { mean, std })
        }
        NoiseKind::Empirical => {
            if residuals.len() < policy.min_rows_empirical {
                return Err(FitError::InsufficientData {
                    node: node.clone(),
                    rows: residuals.len(),
                    need: policy.min_rows_empirical,
                });
            }
            if residuals.len() > policy.residual_cap {
                residuals = reservoir(node, residuals, policy.residual_cap);
            }
            residuals.sort_unstable_by(f64::total_cmp);
            Ok(NoiseModel::Empirical { samples: residuals })
        }
    }
}

/// Deterministic reservoir sample (algorithm R) keyed by node name.
fn reservoir(node: &NodeId, values: Vec<f64>, cap: usize) -> Vec<f64> {
    let mut rng = child_rng(RESERVOIR_SEED, node.as_str());
    let mut keep: Vec<f64> = values[..cap].to_vec();
    for (i, &v) in values.iter().enumerate().skip(cap) {
        let j = rng.gen_range(0..=i);
        if j < cap {
            keep[j] = v;
        }
    }
    keep
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

fn column_stats(node: &NodeId, traces: &[&Series]) -> Result<(f64, f64), FitError> {
    let mut all = Vec::new();
    for trace in traces {
        all.extend_from_slice(trace.column(node)?);
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    Ok((mean, sample_std(&all)))
}

// ---- synthesis --------------------------------------------------------

/// A summary graph with concrete mechanisms, for generating data.
///
/// Mechanism coefficients align with `graph.parents(node)` order. Values
/// before the start of time are zero; discard a warm-up prefix when that
/// matters.
#[derive(Clone, Debug)]
pub struct SummaryScm {
    pub graph: SummaryGraph,
    pub mechanisms: BTreeMap<NodeId, (MechanismKind, Option<NoiseModel>)>,
}

impl SummaryScm {
    pub fn synthesize(&self, steps: usize, warmup: usize, seed: u64) -> Series {
        let order = instantaneous_order(&self.graph);
        let names: Vec<NodeId> = self.graph.nodes().cloned().collect();
        let mut rngs: BTreeMap<NodeId, ChaCha8Rng> = names
            .iter()
            .map(|n| (n.clone(), child_rng(seed, &format!("synth-{n}"))))
            .collect();
        let total = steps + warmup;
        let mut history: BTreeMap<NodeId, Vec<f64>> =
            names.iter().map(|n| (n.clone(), Vec::with_capacity(total))).collect();
        let mut parent_vals = Vec::new();
        for t in 0..total {
            for node in &order {
                let (kind, noise) = &self.mechanisms[node];
                parent_vals.clear();
                for (p, lag) in self.graph.parents(node) {
                    let lag = *lag as usize;
                    parent_vals.push(if t < lag { 0.0 } else { history[p][t - lag] });
                }
                let mut value = kind.deterministic(&parent_vals);
                if let Some(nm) = noise {
                    value += nm.sample(rngs.get_mut(node).unwrap());
                }
                history.get_mut(node).unwrap().push(value);
            }
        }
        let mut series = Series::new(names.clone()).expect("unique node names");
        for t in warmup..total {
            let row: Vec<f64> = names.iter().map(|n| history[n][t]).collect();
            series.push_row(&row).expect("finite synthetic values");
        }
        series
    }
}

/// Order of nodes that respects lag-0 edges, deterministic by name.
pub fn instantaneous_order(graph: &SummaryGraph) -> Vec<NodeId> {
    let mut indegree: BTreeMap<NodeId, usize> =
        graph.nodes().map(|n| (n.clone(), 0)).collect();
    for e in graph.edges() {
        if e.lag == 0 {
            *indegree.get_mut(&e.dst).unwrap() += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<NodeId> = indegree
        .iter()
        .filter_map(|(n, &d)| (d == 0).then(|| n.clone()))
        .collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(node) = ready.pop_first() {
        for (child, lag) in graph.children(&node) {
            if *lag != 0 {
                continue;
            }
            let d = indegree.get_mut(child).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(child.clone());
            }
        }
        order.push(node);
    }
    debug_assert_eq!(order.len(), graph.node_count());
    order
}
