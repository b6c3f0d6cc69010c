//! Slope-walk baseline: splits a target overshoot into per-node deltas
//! along a linear tree, with no noise model and no per-lag resolution.
//!
//! The tree maps each node to the single downstream neighbour it feeds.
//! Attribution walks back from the overshoot to the last crossing of the
//! threshold, takes each node's raw change over that stretch, reweights it
//! by the product of edge coefficients on its path to the target, and
//! charges every node the part of its change its own causes do not explain.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, SummaryGraph};
use crate::series::{Series, SeriesError};

#[derive(Debug, thiserror::Error)]
pub enum HeuristicError {
    #[error("not a tree: {0}")]
    NotATree(String),
    #[error("need at least {need} rows to fit, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("column {0} is constant, no slope to fit")]
    ZeroVariance(NodeId),
    #[error("no overshoot of {threshold} in the {window} steps before t={t}")]
    NoOvershootFound { t: usize, threshold: f64, window: usize },
    #[error("step {step} is out of range for a series of length {len}")]
    StepOutOfRange { step: usize, len: usize },
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Directed tree in which every node except the target feeds exactly one
/// downstream neighbour and every node reaches the target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearTree {
    target: NodeId,
    /// cause -> the one node it feeds.
    effect_of: BTreeMap<NodeId, NodeId>,
}

impl LinearTree {
    pub fn new(
        target: impl Into<NodeId>,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self, HeuristicError> {
        let target = target.into();
        let mut effect_of = BTreeMap::new();
        for (cause, effect) in edges {
            if cause == effect {
                return Err(HeuristicError::NotATree(format!("self-loop at {cause}")));
            }
            if *cause == target {
                return Err(HeuristicError::NotATree(format!(
                    "target {target} has an outgoing edge"
                )));
            }
            if effect_of.insert(cause.clone(), effect.clone()).is_some() {
                return Err(HeuristicError::NotATree(format!(
                    "{cause} feeds more than one node"
                )));
            }
        }
        let tree = LinearTree { target, effect_of };
        for node in tree.effect_of.keys() {
            tree.check_reaches_target(node)?;
        }
        Ok(tree)
    }

    /// Collapses a summary graph to a tree: drops the excluded nodes,
    /// self-edges and lags, and keeps one edge per (cause, effect) pair.
    pub fn from_summary(
        graph: &SummaryGraph,
        target: impl Into<NodeId>,
        excluded: &[NodeId],
    ) -> Result<Self, HeuristicError> {
        let target = target.into();
        let skip: BTreeSet<&NodeId> = excluded.iter().collect();
        if skip.contains(&target) {
            return Err(HeuristicError::NotATree(format!(
                "target {target} is excluded"
            )));
        }
        let mut pairs: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
        for edge in graph.edges() {
            if edge.src == edge.dst || skip.contains(&edge.src) || skip.contains(&edge.dst) {
                continue;
            }
            pairs.insert((edge.src.clone(), edge.dst.clone()));
        }
        let edges: Vec<(NodeId, NodeId)> = pairs.into_iter().collect();
        let tree = LinearTree::new(target, &edges)?;
        for node in graph.nodes() {
            if !skip.contains(node) && !tree.contains(node) {
                return Err(HeuristicError::NotATree(format!(
                    "{node} has no path to {0}",
                    tree.target
                )));
            }
        }
        Ok(tree)
    }

    fn check_reaches_target(&self, from: &NodeId) -> Result<(), HeuristicError> {
        let mut cur = from;
        for _ in 0..=self.effect_of.len() {
            match self.effect_of.get(cur) {
                None if *cur == self.target => return Ok(()),
                None => {
                    return Err(HeuristicError::NotATree(format!(
                        "{from} dead-ends at {cur} instead of {0}",
                        self.target
                    )))
                }
                Some(next) => cur = next,
            }
        }
        Err(HeuristicError::NotATree(format!("cycle through {from}")))
    }

    pub fn target(&self) -> &NodeId {
        &self.target
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        *node == self.target || self.effect_of.contains_key(node)
    }

    /// All tree nodes in name order, target included.
    pub fn nodes(&self) -> Vec<&NodeId> {
        let mut out: Vec<&NodeId> = self.effect_of.keys().collect();
        out.push(&self.target);
        out.sort();
        out
    }

    /// The one node `cause` feeds, `None` for the target.
    pub fn effect(&self, cause: &NodeId) -> Option<&NodeId> {
        self.effect_of.get(cause)
    }

    /// Direct causes feeding `node`, in name order.
    pub fn causes(&self, node: &NodeId) -> Vec<&NodeId> {
        self.effect_of
            .iter()
            .filter(|(_, e)| *e == node)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Tree plus one coefficient per edge, keyed by the edge's cause.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedTree {
    tree: LinearTree,
    coefficients: BTreeMap<NodeId, f64>,
}

/// Rows needed before a slope is worth fitting.
const MIN_FIT_ROWS: usize = 16;

impl FittedTree {
    /// Fits one univariate least-squares slope per edge. Edges straight
    /// into the target keep coefficient 1: the target is a sum of its
    /// direct causes, so their slopes are not re-estimated.
    pub fn fit(tree: LinearTree, train: &Series) -> Result<Self, HeuristicError> {
        if train.len() < MIN_FIT_ROWS {
            return Err(HeuristicError::InsufficientData {
                need: MIN_FIT_ROWS,
                have: train.len(),
            });
        }
        let mut coefficients = BTreeMap::new();
        for (cause, effect) in &tree.effect_of {
            let w = if *effect == tree.target {
                1.0
            } else {
                slope(train.column(cause)?, train.column(effect)?)
                    .ok_or_else(|| HeuristicError::ZeroVariance(cause.clone()))?
            };
            coefficients.insert(cause.clone(), w);
        }
        Ok(FittedTree { tree, coefficients })
    }

    /// Builds from already-known coefficients; every edge needs one.
    pub fn with_coefficients(
        tree: LinearTree,
        coefficients: BTreeMap<NodeId, f64>,
    ) -> Result<Self, HeuristicError> {
        for cause in tree.effect_of.keys() {
            if !coefficients.contains_key(cause) {
                return Err(HeuristicError::NotATree(format!(
                    "missing coefficient for {cause}"
                )));
            }
        }
        Ok(FittedTree { tree, coefficients })
    }

    pub fn tree(&self) -> &LinearTree {
        &self.tree
    }

    pub fn coefficient(&self, cause: &NodeId) -> Option<f64> {
        self.coefficients.get(cause).copied()
    }

    /// Product of edge coefficients along the path to the target; 1 for
    /// the target itself.
    pub fn path_weight(&self, node: &NodeId) -> Option<f64> {
        if !self.tree.contains(node) {
            return None;
        }
        let mut w = 1.0;
        let mut cur = node;
        while let Some(next) = self.tree.effect_of.get(cur) {
            w *= self.coefficients[cur];
            cur = next;
        }
        Some(w)
    }

    /// Splits the overshoot of `threshold` at step `t` among the tree
    /// nodes. Walks back to the most recent step where the target crossed
    /// the threshold; each node is charged its reweighted change over that
    /// stretch minus the change its direct causes already explain.
    pub fn attribute(
        &self,
        series: &Series,
        t: usize,
        threshold: f64,
    ) -> Result<TreeAttribution, HeuristicError> {
        let target_col = series.column(&self.tree.target)?;
        if t >= target_col.len() {
            return Err(HeuristicError::StepOutOfRange { step: t, len: target_col.len() });
        }
        let mut s = None;
        for l in 0..t {
            if target_col[t - l] > threshold && target_col[t - l - 1] <= threshold {
                s = Some(l);
                break;
            }
        }
        let s = s.ok_or(HeuristicError::NoOvershootFound { t, threshold, window: t })?;

        let mut reweighted: BTreeMap<&NodeId, f64> = BTreeMap::new();
        for node in self.tree.nodes() {
            let col = series.column(node)?;
            let delta = col[t] - col[t - s];
            let lambda = self.path_weight(node).expect("tree node");
            reweighted.insert(node, lambda * delta);
        }
        let mut scores: Vec<(NodeId, f64)> = reweighted
            .iter()
            .map(|(node, tilde)| {
                let explained: f64 =
                    self.tree.causes(node).iter().map(|c| reweighted[*c]).sum();
                ((*node).clone(), tilde - explained)
            })
            .collect();
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(TreeAttribution {
            t,
            threshold,
            lag: s as u32,
            target_increase: reweighted[&self.tree.target],
            scores,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fitted tree serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), HeuristicError> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(self.to_json().as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeuristicError> {
        let mut text = String::new();
        BufReader::new(File::open(path)?).read_to_string(&mut text)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Least-squares slope of `effect` on `cause`; `None` when `cause` has no
/// usable variance.
fn slope(cause: &[f64], effect: &[f64]) -> Option<f64> {
    let n = cause.len() as f64;
    let c_mean = cause.iter().sum::<f64>() / n;
    let e_mean = effect.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, e) in cause.iter().zip(effect) {
        num += (c - c_mean) * (e - e_mean);
        den += (c - c_mean) * (c - c_mean);
    }
    if den <= 1e-9 * n * (1.0 + c_mean * c_mean) {
        None
    } else {
        Some(num / den)
    }
}

/// One overshoot split along the tree. `scores` is ranked descending with
/// name-ascending ties; every score sits at the single lag `lag`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeAttribution {
    pub t: usize,
    pub threshold: f64,
    /// Steps from `t` back to the last crossing of the threshold.
    pub lag: u32,
    /// Reweighted change of the target over the walk-back stretch; the
    /// scores sum to this exactly.
    pub target_increase: f64,
    pub scores: Vec<(NodeId, f64)>,
}

impl TreeAttribution {
    pub fn score(&self, node: &NodeId) -> Option<f64> {
        self.scores.iter().find(|(n, _)| n == node).map(|(_, v)| *v)
    }
}
