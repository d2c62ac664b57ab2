//! Inter-agent coupling graphs and the per-agent index sets derived from them.
//!
//! Agent ids are 1-based in every external format (graph files, JSON reports).
//! Internally agents are indexed from 0; [`IndexSets`] stores 0-based ids.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed edge `(source, target)` with 1-based agent ids.
pub type Edge = (usize, usize);

/// Set of 0-based agent indices, iterated in ascending order.
pub type AgentSet = BTreeSet<usize>;

/// State, observation and reward coupling graphs over `n_agents` agents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGraphs {
    pub n_agents: usize,
    #[serde(rename = "state")]
    pub edges_state: Vec<Edge>,
    #[serde(rename = "obs")]
    pub edges_obs: Vec<Edge>,
    #[serde(rename = "reward")]
    pub edges_reward: Vec<Edge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    State,
    Obs,
    Reward,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    OutOfRange { graph: GraphKind, edge: Edge },
    Duplicate { graph: GraphKind, edge: Edge },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::OutOfRange { graph, edge } => {
                write!(f, "{graph:?} edge ({}, {}) has an endpoint out of range", edge.0, edge.1)
            }
            Finding::Duplicate { graph, edge } => {
                write!(f, "{graph:?} edge ({}, {}) is duplicated", edge.0, edge.1)
            }
        }
    }
}

/// Findings from [`CouplingGraphs::validate`]; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl CouplingGraphs {
    pub fn new(
        n_agents: usize,
        edges_state: Vec<Edge>,
        edges_obs: Vec<Edge>,
        edges_reward: Vec<Edge>,
    ) -> Self {
        Self { n_agents, edges_state, edges_obs, edges_reward }
    }

    /// Graphs with no edges at all: every agent is isolated.
    pub fn decoupled(n_agents: usize) -> Self {
        Self::new(n_agents, vec![], vec![], vec![])
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("graphs serialize")
    }

    pub fn edges(&self, kind: GraphKind) -> &[Edge] {
        match kind {
            GraphKind::State => &self.edges_state,
            GraphKind::Obs => &self.edges_obs,
            GraphKind::Reward => &self.edges_reward,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut findings = Vec::new();
        for kind in [GraphKind::State, GraphKind::Obs, GraphKind::Reward] {
            let mut seen = BTreeSet::new();
            for &edge in self.edges(kind) {
                let (j, i) = edge;
                if j == 0 || i == 0 || j > self.n_agents || i > self.n_agents {
                    findings.push(Finding::OutOfRange { graph: kind, edge });
                } else if !seen.insert(edge) {
                    findings.push(Finding::Duplicate { graph: kind, edge });
                }
            }
        }
        ValidationReport { findings }
    }

    /// Out-neighbours of 0-based agent `i` in the state graph, ascending, excluding self.
    pub fn state_out_neighbors(&self, i: usize) -> Vec<usize> {
        let out: AgentSet = self
            .edges_state
            .iter()
            .filter(|&&(j, k)| j == i + 1 && k != j)
            .map(|&(_, k)| k - 1)
            .collect();
        out.into_iter().collect()
    }

    /// In-neighbours of 0-based agent `i` in the state graph, ascending, excluding self.
    pub fn state_in_neighbors(&self, i: usize) -> Vec<usize> {
        let inn: AgentSet = self
            .edges_state
            .iter()
            .filter(|&&(j, k)| k == i + 1 && k != j)
            .map(|&(j, _)| j - 1)
            .collect();
        inn.into_iter().collect()
    }
}

/// Transpose a 1-based edge list. Output is sorted and duplicate-free.
pub fn transpose_edges(edges: &[Edge]) -> Vec<Edge> {
    let set: BTreeSet<Edge> = edges.iter().map(|&(j, i)| (i, j)).collect();
    set.into_iter().collect()
}

/// Per-agent index sets `I_S`, `I_O`, `I_R` (0-based, self included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSets {
    pub i_s: Vec<AgentSet>,
    pub i_o: Vec<AgentSet>,
    pub i_r: Vec<AgentSet>,
}

impl IndexSets {
    pub fn n_agents(&self) -> usize {
        self.i_s.len()
    }
}

/// Index sets for every step `0..=T` of a finite horizon.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeVaryingIndexSets {
    pub steps: Vec<IndexSets>,
}

impl TimeVaryingIndexSets {
    /// Repeat one set of index sets over `0..=horizon`.
    pub fn constant(idx: &IndexSets, horizon: usize) -> Self {
        Self { steps: vec![idx.clone(); horizon + 1] }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, IndexSets::n_agents)
    }
}

fn in_sets(n: usize, edges: &[Edge]) -> Vec<AgentSet> {
    let mut sets: Vec<AgentSet> = (0..n).map(|i| AgentSet::from([i])).collect();
    for &(j, i) in edges {
        sets[i - 1].insert(j - 1);
    }
    sets
}

/// In-neighbourhood plus self for each agent in each graph.
pub fn derive_index_sets(g: &CouplingGraphs) -> Result<IndexSets> {
    if let Some(Finding::OutOfRange { graph, edge }) = g
        .validate()
        .findings
        .into_iter()
        .find(|f| matches!(f, Finding::OutOfRange { .. }))
    {
        return Err(Error::InvalidGraph(format!(
            "{graph:?} edge ({}, {}) is outside 1..={}",
            edge.0, edge.1, g.n_agents
        )));
    }
    Ok(IndexSets {
        i_s: in_sets(g.n_agents, &g.edges_state),
        i_o: in_sets(g.n_agents, &g.edges_obs),
        i_r: in_sets(g.n_agents, &g.edges_reward),
    })
}

/// Convert a 0-based set to ascending 1-based ids.
pub fn to_one_based(set: &AgentSet) -> Vec<usize> {
    set.iter().map(|&i| i + 1).collect()
}

/// Build a 0-based set from 1-based ids.
pub fn from_one_based(ids: &[usize]) -> AgentSet {
    ids.iter().map(|&i| i - 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_sets_are_singletons() {
        let idx = derive_index_sets(&CouplingGraphs::decoupled(4)).unwrap();
        for i in 0..4 {
            assert_eq!(idx.i_s[i], AgentSet::from([i]));
            assert_eq!(idx.i_o[i], AgentSet::from([i]));
            assert_eq!(idx.i_r[i], AgentSet::from([i]));
        }
    }

    #[test]
    fn self_edges_are_absorbed() {
        let g = CouplingGraphs::new(2, vec![(1, 1), (1, 2)], vec![], vec![]);
        let idx = derive_index_sets(&g).unwrap();
        assert_eq!(idx.i_s[0], from_one_based(&[1]));
        assert_eq!(idx.i_s[1], from_one_based(&[1, 2]));
        assert_eq!(g.state_out_neighbors(0), vec![1]);
    }

    #[test]
    fn out_of_range_edge_is_named() {
        let g = CouplingGraphs::new(3, vec![(0, 3)], vec![], vec![]);
        let report = g.validate();
        assert_eq!(report.findings.len(), 1);
        let err = derive_index_sets(&g).unwrap_err().to_string();
        assert!(err.contains("(0, 3)"), "{err}");
    }

    #[test]
    fn duplicate_edge_is_reported() {
        let g = CouplingGraphs::new(3, vec![], vec![(1, 2), (1, 2)], vec![]);
        assert_eq!(
            g.validate().findings,
            vec![Finding::Duplicate { graph: GraphKind::Obs, edge: (1, 2) }]
        );
    }

    #[test]
    fn transpose_small() {
        assert_eq!(transpose_edges(&[(1, 2), (3, 4)]), vec![(2, 1), (4, 3)]);
        assert!(transpose_edges(&[]).is_empty());
    }

    #[test]
    fn json_round_trip_uses_source_first_pairs() {
        let text = r#"{"n_agents":2,"state":[[1,2]],"obs":[],"reward":[[2,1]]}"#;
        let g = CouplingGraphs::from_json_str(text).unwrap();
        assert_eq!(g.edges_state, vec![(1, 2)]);
        assert_eq!(g.to_json_string(), text);
    }
}
