//! Layered Bayesian network over state, action and reward-optimality variables.
//!
//! [`Mabn`] is the full finite-horizon network. [`FoldedMabn`] collapses a
//! time-invariant network to two layers joined by per-agent bidirectional
//! state edges; walking such an edge backwards advances time by one step.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::coupling::{IndexSets, TimeVaryingIndexSets};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    State,
    Action,
    Optimality,
}

impl NodeKind {
    const ALL: [NodeKind; 3] = [NodeKind::State, NodeKind::Action, NodeKind::Optimality];

    fn offset(self) -> usize {
        match self {
            NodeKind::State => 0,
            NodeKind::Action => 1,
            NodeKind::Optimality => 2,
        }
    }

    fn letter(self) -> char {
        match self {
            NodeKind::State => 's',
            NodeKind::Action => 'a',
            NodeKind::Optimality => 'Z',
        }
    }
}

/// Variable node; `agent` is 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MabnNode {
    pub kind: NodeKind,
    pub agent: usize,
    pub time: usize,
}

impl MabnNode {
    pub fn state(agent: usize, time: usize) -> Self {
        Self { kind: NodeKind::State, agent, time }
    }
    pub fn action(agent: usize, time: usize) -> Self {
        Self { kind: NodeKind::Action, agent, time }
    }
    pub fn optimality(agent: usize, time: usize) -> Self {
        Self { kind: NodeKind::Optimality, agent, time }
    }

    /// Label such as `s_3@1` with a 1-based agent id.
    pub fn label(&self) -> String {
        format!("{}_{}@{}", self.kind.letter(), self.agent + 1, self.time)
    }
}

/// Dense node numbering shared by the full and folded graphs.
#[derive(Clone, Copy, Debug)]
struct Layout {
    n_agents: usize,
    layers: usize,
}

impl Layout {
    fn len(&self) -> usize {
        3 * self.n_agents * self.layers
    }

    fn index(&self, node: MabnNode) -> Option<usize> {
        (node.agent < self.n_agents && node.time < self.layers)
            .then(|| (node.time * 3 + node.kind.offset()) * self.n_agents + node.agent)
    }

    fn node(&self, idx: usize) -> MabnNode {
        let agent = idx % self.n_agents;
        let rest = idx / self.n_agents;
        MabnNode { kind: NodeKind::ALL[rest % 3], agent, time: rest / 3 }
    }
}

/// Full network for steps `0..=horizon`.
#[derive(Clone, Debug)]
pub struct Mabn {
    horizon: usize,
    layout: Layout,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
}

fn add_edge(succ: &mut [Vec<usize>], pred: &mut [Vec<usize>], from: usize, to: usize) {
    succ[from].push(to);
    pred[to].push(from);
}

fn finish(adj: &mut [Vec<usize>]) {
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
}

/// Observation and reward edges inside one layer.
fn layer_edges(idx: &IndexSets, t: usize, layout: &Layout, mut push: impl FnMut(usize, usize)) {
    let at = |n: MabnNode| layout.index(n).expect("node in range");
    for i in 0..idx.n_agents() {
        for &j in &idx.i_o[i] {
            push(at(MabnNode::state(j, t)), at(MabnNode::action(i, t)));
        }
        for &j in &idx.i_r[i] {
            push(at(MabnNode::state(j, t)), at(MabnNode::optimality(i, t)));
            push(at(MabnNode::action(j, t)), at(MabnNode::optimality(i, t)));
        }
    }
}

impl Mabn {
    fn from_edges(horizon: usize, n_agents: usize, edges: &[(usize, usize)]) -> Self {
        let layout = Layout { n_agents, layers: horizon + 1 };
        let mut successors = vec![Vec::new(); layout.len()];
        let mut predecessors = vec![Vec::new(); layout.len()];
        for &(a, b) in edges {
            add_edge(&mut successors, &mut predecessors, a, b);
        }
        finish(&mut successors);
        finish(&mut predecessors);
        Self { horizon, layout, successors, predecessors }
    }

    /// Build the network from per-step index sets; `idx` must cover `0..=horizon`.
    pub fn build_full(idx: &TimeVaryingIndexSets, horizon: usize) -> Result<Self> {
        if idx.steps.len() != horizon + 1 {
            return Err(Error::HorizonMismatch(format!(
                "index sets cover {} steps, horizon {horizon} needs {}",
                idx.steps.len(),
                horizon + 1
            )));
        }
        let n = idx.n_agents();
        let layout = Layout { n_agents: n, layers: horizon + 1 };
        let at = |node: MabnNode| layout.index(node).expect("node in range");
        let mut edges = Vec::new();
        for t in 0..=horizon {
            layer_edges(&idx.steps[t], t, &layout, |a, b| edges.push((a, b)));
            if t < horizon {
                let next = &idx.steps[t + 1];
                for i in 0..n {
                    for &j in &next.i_s[i] {
                        edges.push((at(MabnNode::state(j, t)), at(MabnNode::state(i, t + 1))));
                        edges.push((at(MabnNode::action(j, t)), at(MabnNode::state(i, t + 1))));
                    }
                }
            }
        }
        Ok(Self::from_edges(horizon, n, &edges))
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_agents(&self) -> usize {
        self.layout.n_agents
    }

    pub fn node_count(&self) -> usize {
        self.layout.len()
    }

    pub fn edge_count(&self) -> usize {
        self.successors.iter().map(Vec::len).sum()
    }

    fn index(&self, node: MabnNode) -> Result<usize> {
        self.layout.index(node).ok_or_else(|| Error::UnknownNode(node.label()))
    }

    /// All edges in ascending node order.
    pub fn edges(&self) -> Vec<(MabnNode, MabnNode)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (a, list) in self.successors.iter().enumerate() {
            for &b in list {
                out.push((self.layout.node(a), self.layout.node(b)));
            }
        }
        out.sort();
        out
    }

    pub fn successors(&self, node: MabnNode) -> Result<Vec<MabnNode>> {
        let i = self.index(node)?;
        Ok(self.successors[i].iter().map(|&k| self.layout.node(k)).collect())
    }

    pub fn predecessors(&self, node: MabnNode) -> Result<Vec<MabnNode>> {
        let i = self.index(node)?;
        Ok(self.predecessors[i].iter().map(|&k| self.layout.node(k)).collect())
    }

    /// Directed path from `from` to `to`; every node reaches itself.
    pub fn reaches(&self, from: MabnNode, to: MabnNode) -> Result<bool> {
        let a = self.index(from)?;
        let b = self.index(to)?;
        Ok(search(&self.successors, &[a])[b])
    }

    /// Mask of nodes with a directed path into any of `targets`.
    pub fn ancestors_of(&self, targets: &[MabnNode]) -> Result<Vec<bool>> {
        let seeds = targets.iter().map(|&n| self.index(n)).collect::<Result<Vec<_>>>()?;
        Ok(search(&self.predecessors, &seeds))
    }

    pub fn contains_ancestor(&self, mask: &[bool], node: MabnNode) -> bool {
        self.layout.index(node).is_some_and(|k| mask[k])
    }

    /// Kahn's algorithm; true when every node can be ordered.
    pub fn is_acyclic(&self) -> bool {
        let mut indeg: Vec<usize> = self.predecessors.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..indeg.len()).filter(|&k| indeg[k] == 0).collect();
        let mut seen = 0;
        while let Some(k) = queue.pop_front() {
            seen += 1;
            for &m in &self.successors[k] {
                indeg[m] -= 1;
                if indeg[m] == 0 {
                    queue.push_back(m);
                }
            }
        }
        seen == indeg.len()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph mabn {\n");
        for (a, b) in self.edges() {
            let _ = writeln!(s, "  \"{}\" -> \"{}\";", a.label(), b.label());
        }
        s.push_str("}\n");
        s
    }
}

fn search(adj: &[Vec<usize>], seeds: &[usize]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack = Vec::new();
    for &s in seeds {
        if !seen[s] {
            seen[s] = true;
            stack.push(s);
        }
    }
    while let Some(k) = stack.pop() {
        for &m in &adj[k] {
            if !seen[m] {
                seen[m] = true;
                stack.push(m);
            }
        }
    }
    seen
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FoldedEdgeKind {
    Plain,
    /// `s_i(t) -> s_i(t+)` half of a bidirectional pair.
    BidirForward,
    /// `s_i(t+) -> s_i(t)` half; each use is one traversal.
    BidirBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FoldedEdge {
    pub from: MabnNode,
    pub to: MabnNode,
    pub kind: FoldedEdgeKind,
}

/// Two-layer network for time-invariant couplings (layer 0 is `t`, layer 1 is `t+`).
#[derive(Clone, Debug)]
pub struct FoldedMabn {
    layout: Layout,
    edges: Vec<FoldedEdge>,
    /// Reverse adjacency: for each node, (source, kind) pairs.
    reverse: Vec<Vec<(usize, FoldedEdgeKind)>>,
}

impl FoldedMabn {
    pub fn build(idx: &IndexSets) -> Self {
        let n = idx.n_agents();
        let layout = Layout { n_agents: n, layers: 2 };
        let at = |node: MabnNode| layout.index(node).expect("node in range");
        let mut raw: BTreeSet<(usize, usize, FoldedEdgeKind)> = BTreeSet::new();
        for t in 0..2 {
            layer_edges(idx, t, &layout, |a, b| {
                raw.insert((a, b, FoldedEdgeKind::Plain));
            });
        }
        for i in 0..n {
            for &j in &idx.i_s[i] {
                if j != i {
                    raw.insert((at(MabnNode::state(j, 0)), at(MabnNode::state(i, 1)), FoldedEdgeKind::Plain));
                }
                raw.insert((at(MabnNode::action(j, 0)), at(MabnNode::state(i, 1)), FoldedEdgeKind::Plain));
            }
            let (s0, s1) = (at(MabnNode::state(i, 0)), at(MabnNode::state(i, 1)));
            raw.insert((s0, s1, FoldedEdgeKind::BidirForward));
            raw.insert((s1, s0, FoldedEdgeKind::BidirBackward));
        }
        let mut reverse = vec![Vec::new(); layout.len()];
        let edges = raw
            .into_iter()
            .map(|(a, b, kind)| {
                reverse[b].push((a, kind));
                FoldedEdge { from: layout.node(a), to: layout.node(b), kind }
            })
            .collect();
        Self { layout, edges, reverse }
    }

    pub fn n_agents(&self) -> usize {
        self.layout.n_agents
    }

    pub fn edges(&self) -> &[FoldedEdge] {
        &self.edges
    }

    pub fn bidirectional_state_edges(&self) -> Vec<(MabnNode, MabnNode)> {
        self.edges
            .iter()
            .filter(|e| e.kind == FoldedEdgeKind::BidirForward)
            .map(|e| (e.from, e.to))
            .collect()
    }

    /// Graph with the backward halves removed; acyclic by construction.
    pub fn without_backward_edges(&self) -> Mabn {
        let pairs: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|e| e.kind != FoldedEdgeKind::BidirBackward)
            .map(|e| (self.layout.index(e.from).unwrap(), self.layout.index(e.to).unwrap()))
            .collect();
        Mabn::from_edges(1, self.layout.n_agents, &pairs)
    }

    /// Replicate the folded structure over `0..=horizon`.
    pub fn unfold(&self, horizon: usize) -> Mabn {
        let full = Layout { n_agents: self.layout.n_agents, layers: horizon + 1 };
        let shift = |n: MabnNode, t: usize| full.index(MabnNode { time: n.time + t, ..n }).unwrap();
        let mut pairs = Vec::new();
        for e in &self.edges {
            match (e.kind, e.from.time, e.to.time) {
                (FoldedEdgeKind::BidirBackward, _, _) => {}
                (_, 0, 1) => {
                    for t in 0..horizon {
                        pairs.push((shift(e.from, t), shift(e.to, t)));
                    }
                }
                (_, 0, 0) => {
                    for t in 0..=horizon {
                        pairs.push((shift(e.from, t), shift(e.to, t)));
                    }
                }
                _ => {}
            }
        }
        Mabn::from_edges(horizon, self.layout.n_agents, &pairs)
    }

    /// Fewest backward traversals needed from every node to reach `Z_target(t+)`;
    /// `None` when unreachable. 0-1 breadth-first search on reversed edges.
    pub fn min_traversals_to(&self, target_agent: usize) -> Vec<Option<usize>> {
        let target = self.layout.index(MabnNode::optimality(target_agent, 1)).expect("agent in range");
        let mut dist: Vec<Option<usize>> = vec![None; self.layout.len()];
        let mut deque = VecDeque::from([(target, 0usize)]);
        dist[target] = Some(0);
        while let Some((k, d)) = deque.pop_front() {
            if dist[k].is_some_and(|best| best < d) {
                continue;
            }
            for &(src, kind) in &self.reverse[k] {
                let step = usize::from(kind == FoldedEdgeKind::BidirBackward);
                let nd = d + step;
                if dist[src].is_none_or(|best| nd < best) {
                    dist[src] = Some(nd);
                    if step == 0 {
                        deque.push_front((src, nd));
                    } else {
                        deque.push_back((src, nd));
                    }
                }
            }
        }
        dist
    }

    /// First-layer state/action nodes reaching `Z_target(t+)` within `kappa` traversals.
    pub fn bounded_reach_sources(&self, target_agent: usize, kappa: usize) -> BTreeSet<MabnNode> {
        let dist = self.min_traversals_to(target_agent);
        let mut out = BTreeSet::new();
        for agent in 0..self.layout.n_agents {
            for node in [MabnNode::state(agent, 0), MabnNode::action(agent, 0)] {
                let k = self.layout.index(node).unwrap();
                if dist[k].is_some_and(|d| d <= kappa) {
                    out.insert(node);
                }
            }
        }
        out
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph folded_mabn {\n");
        for e in &self.edges {
            match e.kind {
                FoldedEdgeKind::Plain => {
                    let _ = writeln!(s, "  \"{}\" -> \"{}\";", e.from.label(), e.to.label());
                }
                FoldedEdgeKind::BidirForward => {
                    let _ = writeln!(
                        s,
                        "  \"{}\" -> \"{}\" [dir=both, penwidth=2];",
                        e.from.label(),
                        e.to.label()
                    );
                }
                FoldedEdgeKind::BidirBackward => {}
            }
        }
        s.push_str("}\n");
        s
    }
}
