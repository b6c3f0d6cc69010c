//! Shapley attribution of noise terms for an observed anomaly.
//!
//! An event anchors the unfolded model at one time step. The surprise of the
//! observed target value is scored as `-log q(U)`, where `q(I)` is the
//! probability that re-randomizing the noise terms in `I` (all others held
//! at their observed values) still produces a target at least as extreme.
//! Shapley values over the attributable noise set split that score into
//! per-(node, lag) contributions.
//!
//! All coalitions share one pre-drawn noise matrix (common random numbers),
//! so `q` is a pure deterministic function of the coalition for a given
//! seed; the telescoping sum along any permutation is exact and the Shapley
//! values add up to the score to floating-point accuracy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::graph::{Instance, Mode, NodeId};
use crate::mechanisms::{FittedScm, MechanismError, MechanismKind};
use crate::rng::child_rng;
use crate::series::{Series, SeriesError};

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("anomaly scoring needs positive variance for {0}")]
    ZeroVariance(NodeId),
    #[error("event at step {t} needs {need} steps of history, trace has {got}")]
    WindowTooShort { t: usize, need: usize, got: usize },
    #[error("exact Shapley is capped at {cap} players, got {got}")]
    TooManyPlayersForExact { got: usize, cap: usize },
    #[error("sample matrix has {got} columns, model has {want} attributable instances")]
    SampleShape { got: usize, want: usize },
    #[error("samples per coalition must be positive")]
    NoSamples,
    #[error("no training statistics for {0}")]
    MissingTrainStats(NodeId),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Standardized deviation from the training distribution. Monotone in `x`,
/// so exceedance comparisons may equivalently use raw values.
pub fn anomaly_score(x: f64, mean: f64, std: f64, node: &NodeId) -> Result<f64, AttributionError> {
    if !(std > 0.0) {
        return Err(AttributionError::ZeroVariance(node.clone()));
    }
    Ok((x - mean) / std)
}

/// Observed values of every window and dangling instance at one anchor step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnomalyEvent {
    /// Anchor step in the source trace.
    pub t: usize,
    /// Observed value per instance, indexed like `graph.instances()`.
    pub values: Vec<f64>,
    pub target_observed: f64,
    /// Z-score of the observed target under the training distribution.
    pub score: f64,
}

impl AnomalyEvent {
    /// Extract the event at `t` from a trace. The trace must reach back
    /// `max instance lag` steps from `t`.
    pub fn from_series(
        scm: &FittedScm,
        trace: &Series,
        t: usize,
    ) -> Result<Self, AttributionError> {
        let graph = scm.graph();
        let deepest =
            graph.instances().iter().map(|i| i.lag).max().unwrap_or(0) as usize;
        if t < deepest || t >= trace.len().max(1) {
            return Err(AttributionError::WindowTooShort {
                t,
                need: deepest,
                got: trace.len(),
            });
        }
        let mut values = Vec::with_capacity(graph.instance_count());
        for inst in graph.instances() {
            values.push(trace.value(&inst.node, t - inst.lag as usize)?);
        }
        let target = graph.target();
        let target_observed = trace.value(target, t)?;
        let stats = scm
            .train_stats(target)
            .ok_or_else(|| AttributionError::MissingTrainStats(target.clone()))?;
        let score = anomaly_score(target_observed, stats.mean, stats.std, target)?;
        Ok(AnomalyEvent { t, values, target_observed, score })
    }
}

/// How Shapley values are estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum Strategy {
    /// Full enumeration of all coalitions. Capped via `exact_cap`.
    Exact,
    /// Uniformly sampled permutations with telescoping contributions.
    Permutations { count: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EstimatorSettings {
    /// Monte Carlo samples per coalition probability.
    pub samples: usize,
    pub strategy: Strategy,
    pub seed: u64,
    /// Hard cap for the exact strategy (2^n coalitions are enumerated).
    pub exact_cap: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            samples: 2_000,
            strategy: Strategy::Permutations { count: 200 },
            seed: 0,
            exact_cap: 12,
        }
    }
}

/// Attribution of one event.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Anchor step of the event in its source trace.
    pub t: usize,
    pub target: NodeId,
    pub target_observed: f64,
    /// Event z-score.
    pub score: f64,
    /// Information-theoretic surprise `-log q(U)`; the Shapley values sum
    /// to this.
    pub it_score: f64,
    /// Shapley value per attributable instance, sorted by (name, lag).
    pub contributions: Vec<(Instance, f64)>,
    pub samples: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub mode: Mode,
    pub max_lag: u32,
}

impl AttributionResult {
    pub fn contribution(&self, inst: &Instance) -> Option<f64> {
        self.contributions
            .binary_search_by(|(i, _)| i.cmp(inst))
            .ok()
            .map(|idx| self.contributions[idx].1)
    }

    /// Contributions of one node over its lags, ascending by lag.
    pub fn node_lags(&self, node: &NodeId) -> Vec<(u32, f64)> {
        self.contributions
            .iter()
            .filter(|(i, _)| &i.node == node)
            .map(|(i, phi)| (i.lag, *phi))
            .collect()
    }

    /// Sum of contributions per node, by name.
    pub fn ranked_nodes_sum(&self) -> Vec<(NodeId, f64)> {
        aggregate(self, Aggregation::Sum)
    }
}

/// Fold of per-lag contributions into one per-node score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Max,
    Sum,
}

/// Per-node aggregate of a result's per-lag contributions, sorted
/// descending with name-ascending ties.
pub fn aggregate(result: &AttributionResult, agg: Aggregation) -> Vec<(NodeId, f64)> {
    let mut by_node: BTreeMap<&NodeId, f64> = BTreeMap::new();
    for (inst, phi) in &result.contributions {
        by_node
            .entry(&inst.node)
            .and_modify(|acc| match agg {
                Aggregation::Max => *acc = acc.max(*phi),
                Aggregation::Sum => *acc += *phi,
            })
            .or_insert(*phi);
    }
    let mut out: Vec<(NodeId, f64)> =
        by_node.into_iter().map(|(n, v)| (n.clone(), v)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Coalition key: membership bitmask over the attributable set, packed into
/// 64-bit blocks.
#[derive(Clone, PartialEq, Eq, Hash)]
struct CoalitionKey(Box<[u64]>);

struct CoalitionMask {
    blocks: Vec<u64>,
}

impl CoalitionMask {
    fn empty(n: usize) -> Self {
        CoalitionMask { blocks: vec![0; n.div_ceil(64)] }
    }

    fn set(&mut self, idx: usize, on: bool) {
        let (b, bit) = (idx / 64, idx % 64);
        if on {
            self.blocks[b] |= 1 << bit;
        } else {
            self.blocks[b] &= !(1 << bit);
        }
    }

    fn key(&self) -> CoalitionKey {
        CoalitionKey(self.blocks.clone().into_boxed_slice())
    }
}

/// Vectorized evaluator for coalition exceedance probabilities with a shared
/// noise sample matrix and an insert-once cache.
pub struct CoalitionEstimator<'m> {
    scm: &'m FittedScm,
    settings: EstimatorSettings,
    event_t: usize,
    event_observed: f64,
    event_score: f64,
    /// Attributable instances, sorted (name, lag); "players".
    players: Vec<Instance>,
    /// Observed noise per player.
    observed_noise: Vec<f64>,
    /// Shared sample matrix: per player, `samples` noise draws.
    samples: Vec<Vec<f64>>,
    /// Reconstruction value per instance (scalar baseline).
    baseline: Vec<f64>,
    /// Exceedance threshold: the reconstructed target value, so the empty
    /// coalition always has q = 1.
    threshold: f64,
    /// Affected instance indices (self plus descendants, topologically
    /// sorted) per player.
    downstream: Vec<Vec<usize>>,
    target_idx: usize,
    /// Working columns, one value per Monte Carlo sample and instance.
    columns: Vec<Vec<f64>>,
    /// Which players are currently randomized.
    in_coalition: Vec<bool>,
    cache: HashMap<CoalitionKey, f64>,
    mask: CoalitionMask,
    /// Parent index list per instance (copied out of the graph for speed).
    parents: Vec<Vec<usize>>,
    /// Model handle per instance: deterministic mechanisms and noise.
    kinds: Vec<InstanceKind<'m>>,
}

/// Evaluation shape of one instance.
enum InstanceKind<'m> {
    /// Conditioned on its observed value (dangling, truncated mode); the
    /// value lives in the baseline vector.
    Constant,
    /// Mechanism with additive noise (player index gives the noise column).
    Noisy { kind: &'m MechanismKind, player: usize },
    /// Known deterministic mechanism, no noise.
    Deterministic { kind: &'m MechanismKind },
}

impl<'m> CoalitionEstimator<'m> {
    pub fn new(
        scm: &'m FittedScm,
        event: &AnomalyEvent,
        settings: EstimatorSettings,
    ) -> Result<Self, AttributionError> {
        if settings.samples == 0 {
            return Err(AttributionError::NoSamples);
        }
        let players = scm.attributable();
        let mut estimator = Self::prepare(scm, event, settings, &players)?;
        // Shared noise draws: one child stream per player, keyed by name and
        // lag so draw sequences never depend on the player set.
        for (p, inst) in players.iter().enumerate() {
            let mut rng =
                child_rng(settings.seed, &format!("coalition-noise-{}-{}", inst.node, inst.lag));
            estimator.samples[p] = scm.sample_noise(inst, settings.samples, &mut rng)?;
        }
        Ok(estimator)
    }

    /// Like [`CoalitionEstimator::new`] but with caller-provided noise
    /// columns, one per attributable instance. Lets tests enumerate finite
    /// noise grids exactly.
    pub fn with_samples(
        scm: &'m FittedScm,
        event: &AnomalyEvent,
        mut settings: EstimatorSettings,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self, AttributionError> {
        let players = scm.attributable();
        if samples.len() != players.len() {
            return Err(AttributionError::SampleShape {
                got: samples.len(),
                want: players.len(),
            });
        }
        let m = samples.first().map(Vec::len).unwrap_or(0);
        if m == 0 || samples.iter().any(|c| c.len() != m) {
            return Err(AttributionError::NoSamples);
        }
        settings.samples = m;
        let mut estimator = Self::prepare(scm, event, settings, &players)?;
        estimator.samples = samples;
        Ok(estimator)
    }

    fn prepare(
        scm: &'m FittedScm,
        event: &AnomalyEvent,
        settings: EstimatorSettings,
        players: &[Instance],
    ) -> Result<Self, AttributionError> {
        let graph = scm.graph();
        let insts = graph.instances();
        debug_assert_eq!(event.values.len(), insts.len());

        let player_instance: Vec<usize> = players
            .iter()
            .map(|p| graph.instance_index(p).expect("player is an instance"))
            .collect();
        let mut instance_player = vec![usize::MAX; insts.len()];
        for (p, &idx) in player_instance.iter().enumerate() {
            instance_player[idx] = p;
        }

        let parents: Vec<Vec<usize>> =
            (0..insts.len()).map(|i| graph.parent_indices(i).to_vec()).collect();

        // Observed noises and reconstruction baseline, instance by instance
        // in topological order. The baseline recomputes deterministic parts
        // from reconstructed parents, so the threshold matches what the
        // column engine produces for the empty coalition exactly.
        let mut baseline = vec![f64::NAN; insts.len()];
        let mut observed_noise = vec![0.0; players.len()];
        let mut kinds: Vec<Option<InstanceKind<'m>>> = (0..insts.len()).map(|_| None).collect();
        for &idx in graph.topological_order() {
            let inst = &insts[idx];
            match scm.model_for(inst) {
                None => {
                    baseline[idx] = event.values[idx];
                    kinds[idx] = Some(InstanceKind::Constant);
                }
                Some(model) => {
                    let parent_obs: Vec<f64> =
                        parents[idx].iter().map(|&p| event.values[p]).collect();
                    let det = model.deterministic(&parent_obs);
                    match model.noise {
                        Some(_) => {
                            let noise = event.values[idx] - det;
                            let player = instance_player[idx];
                            debug_assert_ne!(player, usize::MAX);
                            observed_noise[player] = noise;
                            // Reconstruction: deterministic part from
                            // reconstructed parents plus observed noise.
                            let parent_rec: Vec<f64> =
                                parents[idx].iter().map(|&p| baseline[p]).collect();
                            baseline[idx] = model.deterministic(&parent_rec) + noise;
                            kinds[idx] = Some(InstanceKind::Noisy { kind: &model.kind, player });
                        }
                        None => {
                            let parent_rec: Vec<f64> =
                                parents[idx].iter().map(|&p| baseline[p]).collect();
                            baseline[idx] = model.deterministic(&parent_rec);
                            kinds[idx] = Some(InstanceKind::Deterministic { kind: &model.kind });
                        }
                    }
                }
            }
        }
        let kinds: Vec<InstanceKind<'m>> =
            kinds.into_iter().map(|k| k.expect("all instances prepared")).collect();

        let target_idx = graph
            .instance_index(&graph.target_instance())
            .expect("target instance exists");
        let threshold = baseline[target_idx];

        let downstream: Vec<Vec<usize>> = player_instance
            .iter()
            .map(|&idx| graph.descendants_in_topo_order(idx))
            .collect();

        let m = settings.samples;
        let columns: Vec<Vec<f64>> = baseline.iter().map(|&v| vec![v; m]).collect();

        Ok(CoalitionEstimator {
            scm,
            settings,
            event_t: event.t,
            event_observed: event.target_observed,
            event_score: event.score,
            players: players.to_vec(),
            observed_noise,
            samples: vec![Vec::new(); players.len()],
            baseline,
            threshold,
            downstream,
            target_idx,
            columns,
            in_coalition: vec![false; players.len()],
            cache: HashMap::new(),
            mask: CoalitionMask::empty(players.len()),
            parents,
            kinds,
        })
    }

    pub fn players(&self) -> &[Instance] {
        &self.players
    }

    pub fn observed_noise(&self, player: usize) -> f64 {
        self.observed_noise[player]
    }

    /// Reconstructed target value; within numerical error of the observed
    /// target when the model is consistent.
    pub fn reconstructed_target(&self) -> f64 {
        self.threshold
    }

    fn q_bounds(&self) -> (f64, f64) {
        (1.0 / (self.settings.samples as f64 + 1.0), 1.0)
    }

    /// Toggle a player in or out of the coalition and refresh affected
    /// columns. Column values are always recomputed from parents, so the
    /// state depends only on the coalition, not on the toggle order.
    fn toggle(&mut self, player: usize, on: bool) {
        debug_assert_ne!(self.in_coalition[player], on);
        self.in_coalition[player] = on;
        self.mask.set(player, on);
        let affected = std::mem::take(&mut self.downstream[player]);
        let mut vals: Vec<f64> = Vec::new();
        for &idx in &affected {
            // Take the written column out so parent columns stay borrowable.
            // Parents never include the instance itself (no lag-0 self
            // edges), so they are intact while the column is rebuilt.
            let mut col = std::mem::take(&mut self.columns[idx]);
            match &self.kinds[idx] {
                InstanceKind::Constant => {}
                InstanceKind::Noisy { kind, player: p } => {
                    match kind {
                        MechanismKind::Linear { intercept, coefficients } => {
                            col.fill(*intercept);
                            for (k, &par) in self.parents[idx].iter().enumerate() {
                                let c = coefficients[k];
                                for (cv, pv) in col.iter_mut().zip(&self.columns[par]) {
                                    *cv += c * pv;
                                }
                            }
                        }
                        MechanismKind::Root { mean } => col.fill(*mean),
                        MechanismKind::Control(_) => unreachable!("noisy control"),
                    }
                    if self.in_coalition[*p] {
                        for (cv, nv) in col.iter_mut().zip(&self.samples[*p]) {
                            *cv += nv;
                        }
                    } else {
                        let noise = self.observed_noise[*p];
                        for cv in col.iter_mut() {
                            *cv += noise;
                        }
                    }
                }
                InstanceKind::Deterministic { kind } => {
                    let parents = &self.parents[idx];
                    vals.resize(parents.len(), 0.0);
                    for (s, cv) in col.iter_mut().enumerate() {
                        for (k, &par) in parents.iter().enumerate() {
                            vals[k] = self.columns[par][s];
                        }
                        *cv = kind.deterministic(&vals);
                    }
                }
            }
            self.columns[idx] = col;
        }
        self.downstream[player] = affected;
    }

    /// Reset to the empty coalition (all noises observed).
    fn reset(&mut self) {
        for p in 0..self.players.len() {
            if self.in_coalition[p] {
                self.in_coalition[p] = false;
                self.mask.set(p, false);
            }
        }
        for (idx, col) in self.columns.iter_mut().enumerate() {
            col.fill(self.baseline[idx]);
        }
    }

    /// Exceedance probability of the current coalition, clamped away from
    /// zero, cached per coalition.
    fn q_current(&mut self) -> f64 {
        let key = self.mask.key();
        if let Some(&q) = self.cache.get(&key) {
            return q;
        }
        let m = self.settings.samples;
        let threshold = self.threshold;
        let count = self.columns[self.target_idx][..m]
            .iter()
            .filter(|&&v| v >= threshold)
            .count();
        let (lo, hi) = self.q_bounds();
        let q = ((count as f64) / (m as f64)).clamp(lo, hi);
        self.cache.insert(key, q);
        q
    }

    /// Exceedance probability for an explicit coalition of players.
    pub fn estimate_q(&mut self, coalition: &[usize]) -> f64 {
        self.reset();
        for &p in coalition {
            if !self.in_coalition[p] {
                self.toggle(p, true);
            }
        }
        self.q_current()
    }

    /// `-log q(U)`: surprise of the observed target under full
    /// re-randomization.
    pub fn it_score(&mut self) -> f64 {
        let all: Vec<usize> = (0..self.players.len()).collect();
        -self.estimate_q(&all).ln()
    }

    /// Shapley attribution over all players.
    pub fn shapley(&mut self) -> Result<AttributionResult, AttributionError> {
        let n = self.players.len();
        let phi = match self.settings.strategy {
            Strategy::Exact => self.shapley_exact()?,
            Strategy::Permutations { count } => self.shapley_permutations(count),
        };
        let contributions: Vec<(Instance, f64)> =
            self.players.iter().cloned().zip(phi).collect();
        let all: Vec<usize> = (0..n).collect();
        let it_score = -self.estimate_q(&all).ln();
        let graph = self.scm.graph();
        Ok(AttributionResult {
            t: self.event_t,
            target: graph.target().clone(),
            target_observed: self.event_observed,
            score: self.event_score,
            it_score,
            contributions,
            samples: self.settings.samples,
            strategy: self.settings.strategy,
            seed: self.settings.seed,
            mode: graph.mode(),
            max_lag: graph.max_lag(),
        })
    }

    /// Exact Shapley by enumerating coalitions in Gray-code order, so each
    /// step toggles a single player.
    fn shapley_exact(&mut self) -> Result<Vec<f64>, AttributionError> {
        let n = self.players.len();
        if n > self.settings.exact_cap {
            return Err(AttributionError::TooManyPlayersForExact {
                got: n,
                cap: self.settings.exact_cap,
            });
        }
        self.reset();
        let total = 1usize << n;
        let mut log_q = vec![0.0f64; total];
        log_q[0] = self.q_current().ln();
        let mut gray_prev = 0usize;
        for k in 1..total {
            let gray = k ^ (k >> 1);
            let flipped = (gray ^ gray_prev).trailing_zeros() as usize;
            self.toggle(flipped, gray & (1 << flipped) != 0);
            log_q[gray] = self.q_current().ln();
            gray_prev = gray;
        }
        // Shapley weights by coalition size.
        let mut weight = vec![0.0f64; n];
        for s in 0..n {
            // 1 / (n * C(n-1, s))
            let mut binom = 1.0f64;
            for i in 0..s {
                binom *= (n - 1 - i) as f64 / (i + 1) as f64;
            }
            weight[s] = 1.0 / (n as f64 * binom);
        }
        let mut phi = vec![0.0f64; n];
        for mask in 0..total {
            let size = (mask as u64).count_ones() as usize;
            for u in 0..n {
                if mask & (1 << u) == 0 {
                    let with = mask | (1 << u);
                    phi[u] += weight[size] * (log_q[mask] - log_q[with]);
                }
            }
        }
        Ok(phi)
    }

    /// Permutation-sampled Shapley. Along each permutation the coalition
    /// grows one player at a time; contributions telescope to the full
    /// coalition's log-probability, keeping the efficiency identity exact
    /// per permutation.
    fn shapley_permutations(&mut self, count: usize) -> Vec<f64> {
        let n = self.players.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = child_rng(self.settings.seed, "shapley-permutations");
        let mut phi_sum = vec![0.0f64; n];
        for _ in 0..count.max(1) {
            shuffle(&mut order, &mut rng);
            self.reset();
            let mut log_prev = self.q_current().ln();
            for &u in &order {
                self.toggle(u, true);
                let log_next = self.q_current().ln();
                phi_sum[u] += log_prev - log_next;
                log_prev = log_next;
            }
        }
        let scale = 1.0 / count.max(1) as f64;
        phi_sum.iter().map(|v| v * scale).collect()
    }
}

/// Fisher-Yates with explicit u64 sampling (stable across rand versions in
/// spirit: only `next_u64` is consumed).
fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::RngCore;
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
}

/// Convenience wrapper: build the estimator for an event and attribute it.
pub fn attribute_event(
    scm: &FittedScm,
    event: &AnomalyEvent,
    settings: EstimatorSettings,
) -> Result<AttributionResult, AttributionError> {
    CoalitionEstimator::new(scm, event, settings)?.shapley()
}
