//! Summary graphs with lagged edges and their unfolding over a time window.
//!
//! A summary graph has one node per observed variable and edges labelled with
//! a non-negative lag: `(src, dst, lag)` means `dst` at time `t` depends on
//! `src` at time `t - lag`. Unfolding materializes one node instance per
//! `(variable, lag)` pair over a window of `max_lag + 1` steps anchored at the
//! event time, plus the dangling instances just outside the window that the
//! window still depends on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Name of a summary-graph node. Non-empty, no whitespace.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(name: impl Into<String>) -> Self {
        NodeId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId::new(s)
    }
}

/// Directed edge `src -> dst` with lag in time steps.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct LaggedEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub lag: u32,
}

/// A node instance in an unfolded graph: `node` observed `lag` steps before
/// the anchor time.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Instance {
    pub node: NodeId,
    pub lag: u32,
}

impl Instance {
    pub fn new(node: impl Into<NodeId>, lag: u32) -> Self {
        Instance { node: node.into(), lag }
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[t-{}]", self.node, self.lag)
    }
}

impl fmt::Debug for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.node, self.lag)
    }
}

/// How instances outside the window are handled when unfolding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Dangling instances are conditioned on their observed values.
    Truncated,
    /// Dangling instances keep refitted mechanisms over the dangling set and
    /// contribute their own noise terms.
    NonTruncated,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Truncated => f.write_str("truncated"),
            Mode::NonTruncated => f.write_str("non-truncated"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("node name must be non-empty and contain no whitespace: {0:?}")]
    InvalidNodeName(String),
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("edge references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate edge {src} -> {dst} lag {lag}", src = .0.src, dst = .0.dst, lag = .0.lag)]
    DuplicateEdge(LaggedEdge),
    #[error("self edge on {0} must have lag >= 1")]
    SelfEdgeAtLagZero(NodeId),
    #[error("instantaneous (lag 0) subgraph has a cycle: {}", cycle_string(.0))]
    CyclicInstantaneousGraph(Vec<NodeId>),
    #[error("graph text line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn cycle_string(nodes: &[NodeId]) -> String {
    nodes.iter().map(NodeId::as_str).collect::<Vec<_>>().join(" -> ")
}

/// Summary causal graph over named variables with lagged edges.
///
/// Instances are immutable after construction; `new` validates node names,
/// edge endpoints, self-edge lags and acyclicity of the lag-0 subgraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct SummaryGraph {
    nodes: BTreeSet<NodeId>,
    edges: BTreeSet<LaggedEdge>,
    /// Parents per node, sorted by (src name, lag).
    parents: BTreeMap<NodeId, Vec<(NodeId, u32)>>,
    /// Children per node, sorted by (dst name, lag).
    children: BTreeMap<NodeId, Vec<(NodeId, u32)>>,
}

#[derive(Serialize, Deserialize)]
struct GraphSpec {
    nodes: Vec<NodeId>,
    edges: Vec<LaggedEdge>,
}

impl From<SummaryGraph> for GraphSpec {
    fn from(g: SummaryGraph) -> Self {
        GraphSpec {
            nodes: g.nodes.iter().cloned().collect(),
            edges: g.edges.iter().cloned().collect(),
        }
    }
}

impl TryFrom<GraphSpec> for SummaryGraph {
    type Error = GraphError;

    fn try_from(spec: GraphSpec) -> Result<Self, GraphError> {
        SummaryGraph::new(spec.nodes, spec.edges)
    }
}

impl SummaryGraph {
    pub fn new(
        nodes: impl IntoIterator<Item = impl Into<NodeId>>,
        edges: impl IntoIterator<Item = impl Into<LaggedEdge>>,
    ) -> Result<Self, GraphError> {
        let mut node_set = BTreeSet::new();
        for n in nodes {
            let n = n.into();
            if n.as_str().is_empty() || n.as_str().chars().any(char::is_whitespace) {
                return Err(GraphError::InvalidNodeName(n.as_str().to_owned()));
            }
            if !node_set.insert(n.clone()) {
                return Err(GraphError::DuplicateNode(n));
            }
        }
        let mut edge_set = BTreeSet::new();
        for e in edges {
            let e = e.into();
            for end in [&e.src, &e.dst] {
                if !node_set.contains(end) {
                    return Err(GraphError::UnknownNode(end.clone()));
                }
            }
            if e.src == e.dst && e.lag == 0 {
                return Err(GraphError::SelfEdgeAtLagZero(e.src));
            }
            if !edge_set.insert(e.clone()) {
                return Err(GraphError::DuplicateEdge(e));
            }
        }
        let mut parents: BTreeMap<NodeId, Vec<(NodeId, u32)>> =
            node_set.iter().map(|n| (n.clone(), Vec::new())).collect();
        let mut children: BTreeMap<NodeId, Vec<(NodeId, u32)>> =
            node_set.iter().map(|n| (n.clone(), Vec::new())).collect();
        for e in &edge_set {
            parents.get_mut(&e.dst).unwrap().push((e.src.clone(), e.lag));
            children.get_mut(&e.src).unwrap().push((e.dst.clone(), e.lag));
        }
        for list in parents.values_mut().chain(children.values_mut()) {
            list.sort();
        }
        let graph = SummaryGraph { nodes: node_set, edges: edge_set, parents, children };
        if let Some(cycle) = graph.instantaneous_cycle() {
            return Err(GraphError::CyclicInstantaneousGraph(cycle));
        }
        Ok(graph)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.nodes.contains(node)
    }

    pub fn edges(&self) -> impl Iterator<Item = &LaggedEdge> {
        self.edges.iter()
    }

    /// Parents of `node` as `(src, lag)`, sorted by (name, lag).
    pub fn parents(&self, node: &NodeId) -> &[(NodeId, u32)] {
        self.parents.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Children of `node` as `(dst, lag)`, sorted by (name, lag).
    pub fn children(&self, node: &NodeId) -> &[(NodeId, u32)] {
        self.children.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Largest lag on any edge.
    pub fn max_edge_lag(&self) -> u32 {
        self.edges.iter().map(|e| e.lag).max().unwrap_or(0)
    }

    /// Nodes with no incoming edges.
    pub fn roots(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().filter(|n| self.parents(n).is_empty())
    }

    /// Returns a cycle through lag-0 edges if one exists.
    fn instantaneous_cycle(&self) -> Option<Vec<NodeId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum State {
            New,
            Open,
            Done,
        }
        let mut state: BTreeMap<&NodeId, State> =
            self.nodes.iter().map(|n| (n, State::New)).collect();
        let mut stack: Vec<NodeId> = Vec::new();

        fn visit<'g>(
            graph: &'g SummaryGraph,
            node: &'g NodeId,
            state: &mut BTreeMap<&'g NodeId, State>,
            stack: &mut Vec<NodeId>,
        ) -> Option<Vec<NodeId>> {
            state.insert(node, State::Open);
            stack.push(node.clone());
            for (child, lag) in graph.children(node) {
                if *lag != 0 {
                    continue;
                }
                let child = graph.nodes.get(child).expect("validated endpoint");
                match state[child] {
                    State::Done => {}
                    State::Open => {
                        let start = stack.iter().position(|n| n == child).unwrap();
                        let mut cycle = stack[start..].to_vec();
                        cycle.push(child.clone());
                        return Some(cycle);
                    }
                    State::New => {
                        if let Some(c) = visit(graph, child, state, stack) {
                            return Some(c);
                        }
                    }
                }
            }
            stack.pop();
            state.insert(node, State::Done);
            None
        }

        let nodes: Vec<&NodeId> = self.nodes.iter().collect();
        for node in nodes {
            if state[node] == State::New {
                if let Some(c) = visit(self, node, &mut state, &mut stack) {
                    return Some(c);
                }
            }
        }
        None
    }

    /// Parse the line-oriented graph text format.
    ///
    /// Lines are `node <name>` or `edge <src> <dst> <lag>`; `#` starts a
    /// comment, blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut nodes: Vec<NodeId> = Vec::new();
        let mut edges: Vec<LaggedEdge> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            match fields[0] {
                "node" => {
                    if fields.len() != 2 {
                        return Err(GraphError::Parse {
                            line,
                            message: format!("expected `node <name>`, got {content:?}"),
                        });
                    }
                    nodes.push(NodeId::new(fields[1]));
                }
                "edge" => {
                    if fields.len() != 4 {
                        return Err(GraphError::Parse {
                            line,
                            message: format!("expected `edge <src> <dst> <lag>`, got {content:?}"),
                        });
                    }
                    let lag: u32 = fields[3].parse().map_err(|_| GraphError::Parse {
                        line,
                        message: format!("lag must be a non-negative integer, got {:?}", fields[3]),
                    })?;
                    edges.push(LaggedEdge {
                        src: NodeId::new(fields[1]),
                        dst: NodeId::new(fields[2]),
                        lag,
                    });
                }
                other => {
                    return Err(GraphError::Parse {
                        line,
                        message: format!("unknown directive {other:?}"),
                    });
                }
            }
        }
        SummaryGraph::new(nodes, edges)
    }

    /// Render to the graph text format; `from_text` of the output round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str("node ");
            out.push_str(n.as_str());
            out.push('\n');
        }
        for e in &self.edges {
            out.push_str(&format!("edge {} {} {}\n", e.src, e.dst, e.lag));
        }
        out
    }

    /// Unfold over a window of `max_lag + 1` steps anchored at the target.
    pub fn unfold(
        &self,
        target: &NodeId,
        max_lag: u32,
        mode: Mode,
    ) -> Result<UnfoldedGraph, GraphError> {
        UnfoldedGraph::new(self.clone(), target.clone(), max_lag, mode)
    }
}

impl From<(&str, &str, u32)> for LaggedEdge {
    fn from((src, dst, lag): (&str, &str, u32)) -> Self {
        LaggedEdge { src: NodeId::new(src), dst: NodeId::new(dst), lag }
    }
}

/// A summary graph unfolded over `max_lag + 1` time steps.
///
/// The window holds every `(node, lag)` instance with `lag <= max_lag`.
/// Dangling instances are parents of window instances that fall outside the
/// window. In non-truncated mode, edges between dangling instances are kept
/// when both endpoints dangle; the dangling set itself never grows beyond the
/// direct parents of the window.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "UnfoldSpec", into = "UnfoldSpec")]
pub struct UnfoldedGraph {
    summary: SummaryGraph,
    target: NodeId,
    max_lag: u32,
    mode: Mode,
    /// Window instances first (sorted by name then lag), then dangling
    /// instances (same order).
    instances: Vec<Instance>,
    window_len: usize,
    index: BTreeMap<Instance, usize>,
    /// Parent indices per instance, sorted by (name, lag) of the parent.
    parents: Vec<Vec<usize>>,
    /// Indices into `instances` in dependency order (parents first).
    topo: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct UnfoldSpec {
    summary: SummaryGraph,
    target: NodeId,
    max_lag: u32,
    mode: Mode,
}

impl From<UnfoldedGraph> for UnfoldSpec {
    fn from(g: UnfoldedGraph) -> Self {
        UnfoldSpec { summary: g.summary, target: g.target, max_lag: g.max_lag, mode: g.mode }
    }
}

impl TryFrom<UnfoldSpec> for UnfoldedGraph {
    type Error = GraphError;

    fn try_from(spec: UnfoldSpec) -> Result<Self, GraphError> {
        UnfoldedGraph::new(spec.summary, spec.target, spec.max_lag, spec.mode)
    }
}

impl UnfoldedGraph {
    fn new(
        summary: SummaryGraph,
        target: NodeId,
        max_lag: u32,
        mode: Mode,
    ) -> Result<Self, GraphError> {
        if !summary.contains(&target) {
            return Err(GraphError::UnknownNode(target));
        }

        let mut window: Vec<Instance> = Vec::new();
        for node in summary.nodes() {
            for lag in 0..=max_lag {
                window.push(Instance::new(node.clone(), lag));
            }
        }
        window.sort();

        // Dangling set: parents of window instances with lag beyond the window.
        let mut dangling: BTreeSet<Instance> = BTreeSet::new();
        for inst in &window {
            for (src, edge_lag) in summary.parents(&inst.node) {
                let parent_lag = inst.lag + edge_lag;
                if parent_lag > max_lag {
                    dangling.insert(Instance::new(src.clone(), parent_lag));
                }
            }
        }

        let mut instances = window;
        let window_len = instances.len();
        instances.extend(dangling.iter().cloned());
        let index: BTreeMap<Instance, usize> =
            instances.iter().enumerate().map(|(i, inst)| (inst.clone(), i)).collect();

        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); instances.len()];
        for (i, inst) in instances.iter().enumerate() {
            let in_window = i < window_len;
            if !in_window && mode == Mode::Truncated {
                continue; // conditioned on observations: no parents kept
            }
            for (src, edge_lag) in summary.parents(&inst.node) {
                let parent = Instance::new(src.clone(), inst.lag + edge_lag);
                match index.get(&parent) {
                    Some(&p) => {
                        // For a dangling child, keep the edge only when the
                        // parent also dangles.
                        if in_window || p >= window_len {
                            parents[i].push(p);
                        }
                    }
                    None => debug_assert!(!in_window, "window parents are materialized"),
                }
            }
        }

        let topo = topo_order(&instances, &parents);

        Ok(UnfoldedGraph {
            summary,
            target,
            max_lag,
            mode,
            instances,
            window_len,
            index,
            parents,
            topo,
        })
    }

    pub fn summary(&self) -> &SummaryGraph {
        &self.summary
    }

    pub fn target(&self) -> &NodeId {
        &self.target
    }

    /// Instance of the target at the anchor time.
    pub fn target_instance(&self) -> Instance {
        Instance::new(self.target.clone(), 0)
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// All instances: window first, then dangling, each sorted by (name, lag).
    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn window(&self) -> &[Instance] {
        &self.instances[..self.window_len]
    }

    pub fn dangling(&self) -> &[Instance] {
        &self.instances[self.window_len..]
    }

    pub fn is_dangling_idx(&self, idx: usize) -> bool {
        idx >= self.window_len
    }

    pub fn is_dangling(&self, inst: &Instance) -> bool {
        self.index.get(inst).is_some_and(|&i| self.is_dangling_idx(i))
    }

    pub fn instance_index(&self, inst: &Instance) -> Option<usize> {
        self.index.get(inst).copied()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Parents of the instance at `idx`, respecting the unfolding mode.
    pub fn parent_indices(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn parent_instances(&self, inst: &Instance) -> Vec<Instance> {
        match self.instance_index(inst) {
            Some(i) => self.parents[i].iter().map(|&p| self.instances[p].clone()).collect(),
            None => Vec::new(),
        }
    }

    /// Indices in dependency order: every parent precedes its children.
    /// Ties are broken by (lag descending, name ascending), so the order is
    /// reproducible across runs.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    /// Greatest lag among instances of `node`, including dangling instances
    /// in non-truncated mode.
    pub fn effective_max_lag(&self, node: &NodeId) -> Result<u32, GraphError> {
        if !self.summary.contains(node) {
            return Err(GraphError::UnknownNode(node.clone()));
        }
        let mut max = self.max_lag;
        if self.mode == Mode::NonTruncated {
            for inst in self.dangling() {
                if &inst.node == node {
                    max = max.max(inst.lag);
                }
            }
        }
        Ok(max)
    }

    /// Instance indices whose value can influence the instance at `from`,
    /// i.e. `from` plus all its descendants, in topological order.
    pub fn descendants_in_topo_order(&self, from: usize) -> Vec<usize> {
        let mut reach = vec![false; self.instances.len()];
        reach[from] = true;
        let mut out = Vec::new();
        for &idx in &self.topo {
            if !reach[idx] {
                let hit = self.parents[idx].iter().any(|&p| reach[p]);
                if hit {
                    reach[idx] = true;
                }
            }
            if reach[idx] {
                out.push(idx);
            }
        }
        out
    }
}

/// Kahn's algorithm; among ready instances the one with the greatest lag is
/// emitted first, name ascending on equal lags.
fn topo_order(instances: &[Instance], parents: &[Vec<usize>]) -> Vec<usize> {
    let n = instances.len();
    let mut indegree = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (child, ps) in parents.iter().enumerate() {
        indegree[child] = ps.len();
        for &p in ps {
            children[p].push(child);
        }
    }
    // Ready set keyed for deterministic extraction.
    let mut ready: BTreeSet<(std::cmp::Reverse<u32>, NodeId, usize)> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| (std::cmp::Reverse(instances[i].lag), instances[i].node.clone(), i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some((_, _, idx)) = ready.pop_first() {
        order.push(idx);
        for &c in &children[idx] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((std::cmp::Reverse(instances[c].lag), instances[c].node.clone(), c));
            }
        }
    }
    debug_assert_eq!(order.len(), n, "unfolded graph must be acyclic");
    order
}
