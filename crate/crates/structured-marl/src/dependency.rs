//! Value, gradient and combined dependency sets.
//!
//! Three independent routes produce the value-dependency sets `I_Q`: the
//! backward recursion over reachability sets `U_i^τ`, path search on the full
//! network, and bounded search on the folded network. They agree exactly on
//! time-invariant inputs.

use std::collections::BTreeSet;

use petgraph::algo::kosaraju_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::coupling::{AgentSet, CouplingGraphs, Edge, IndexSets, TimeVaryingIndexSets, to_one_based};
use crate::error::{Error, Result};
use crate::mabn::{FoldedMabn, Mabn, MabnNode};

/// `I_Q^i` for every agent (0-based). Edge `(j, i)` of `E_VD` is `j ∈ I_Q^i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValueDependency {
    pub sets: Vec<AgentSet>,
}

/// `I_GD^i = { j : i ∈ I_Q^j }`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientDependency {
    pub sets: Vec<AgentSet>,
}

/// `I_Qhat^i = ∪_{j ∈ I_GD^i} I_Q^j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QhatIndex {
    pub sets: Vec<AgentSet>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KappaDependency {
    pub kappa: usize,
    pub sets: Vec<AgentSet>,
}

fn edges_of(sets: &[AgentSet]) -> BTreeSet<(usize, usize)> {
    sets.iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&j| (j, i)))
        .collect()
}

impl ValueDependency {
    pub fn n_agents(&self) -> usize {
        self.sets.len()
    }

    /// `E_VD` as 0-based `(j, i)` pairs, self loops included.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        edges_of(&self.sets)
    }

    pub fn is_complete(&self) -> bool {
        let n = self.n_agents();
        self.sets.iter().all(|s| s.len() == n)
    }

    /// Number of strongly connected components of `E_VD`.
    pub fn strongly_connected_components(&self) -> usize {
        let mut g = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..self.n_agents()).map(|_| g.add_node(())).collect();
        for (j, i) in self.edges() {
            if i != j {
                g.add_edge(nodes[j], nodes[i], ());
            }
        }
        kosaraju_scc(&g).len()
    }
}

impl KappaDependency {
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        edges_of(&self.sets)
    }

    pub fn as_value_dependency(&self) -> ValueDependency {
        ValueDependency { sets: self.sets.clone() }
    }
}

fn check_window(idx: &TimeVaryingIndexSets, t: usize, horizon: usize) -> Result<()> {
    if t > horizon {
        return Err(Error::HorizonMismatch(format!("start {t} is after horizon {horizon}")));
    }
    if idx.steps.len() != horizon + 1 {
        return Err(Error::HorizonMismatch(format!(
            "index sets cover {} steps, horizon {horizon} needs {}",
            idx.steps.len(),
            horizon + 1
        )));
    }
    Ok(())
}

/// Agents observed by any agent in `agents` at one step.
fn observed_by(idx: &IndexSets, agents: impl IntoIterator<Item = usize>) -> AgentSet {
    let mut out = AgentSet::new();
    for j in agents {
        out.extend(idx.i_o[j].iter().copied());
    }
    out
}

fn u_step(now: &IndexSets, next: Option<(&IndexSets, &AgentSet)>, i: usize) -> AgentSet {
    let mut u = observed_by(now, now.i_r[i].iter().copied());
    if let Some((next_idx, later)) = next {
        let drivers: AgentSet = later.iter().flat_map(|&j| next_idx.i_s[j].iter().copied()).collect();
        u.extend(observed_by(now, drivers));
    }
    u
}

/// Reachability sets `U_i^τ` for `τ = t..=horizon`; `result[i][τ - t]`.
pub fn u_sets(idx: &TimeVaryingIndexSets, t: usize, horizon: usize) -> Result<Vec<Vec<AgentSet>>> {
    check_window(idx, t, horizon)?;
    let n = idx.n_agents();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut seq = vec![AgentSet::new(); horizon - t + 1];
        seq[horizon - t] = u_step(&idx.steps[horizon], None, i);
        for tau in (t..horizon).rev() {
            let later = seq[tau + 1 - t].clone();
            seq[tau - t] = u_step(&idx.steps[tau], Some((&idx.steps[tau + 1], &later)), i);
        }
        out.push(seq);
    }
    Ok(out)
}

/// `I_Q^i(t) = ∪_{τ=t..=T} U_i^τ`.
pub fn value_dependency(idx: &TimeVaryingIndexSets, t: usize, horizon: usize) -> Result<ValueDependency> {
    let u = u_sets(idx, t, horizon)?;
    let sets = u
        .into_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut s: AgentSet = seq.into_iter().flatten().collect();
            s.insert(i);
            s
        })
        .collect();
    Ok(ValueDependency { sets })
}

/// Time-invariant `I_Q` obtained by iterating the recursion until `U` stops changing.
pub fn value_dependency_fixed_point(idx: &IndexSets) -> ValueDependency {
    let sets = (0..idx.n_agents())
        .map(|i| {
            let mut acc = u_step(idx, None, i);
            loop {
                let next = u_step(idx, Some((idx, &acc)), i);
                let mut merged = acc.clone();
                merged.extend(next.iter().copied());
                if merged == acc {
                    break;
                }
                acc = merged;
            }
            acc.insert(i);
            acc
        })
        .collect();
    ValueDependency { sets }
}

/// Path-search route: `j ∈ I_Q^i(t)` iff some `s_j(τ)` or `a_j(τ)` reaches some
/// `Z_i(τ')` with `t ≤ τ ≤ τ' ≤ T`.
pub fn value_dependency_by_pathfinding(mabn: &Mabn, t: usize, horizon: usize) -> Result<ValueDependency> {
    if t > horizon || horizon > mabn.horizon() {
        return Err(Error::HorizonMismatch(format!(
            "window {t}..={horizon} does not fit network horizon {}",
            mabn.horizon()
        )));
    }
    let n = mabn.n_agents();
    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut set = AgentSet::from([i]);
        for tau_end in t..=horizon {
            let mask = mabn.ancestors_of(&[MabnNode::optimality(i, tau_end)])?;
            for j in 0..n {
                let hit = (t..=tau_end).any(|tau| {
                    mabn.contains_ancestor(&mask, MabnNode::state(j, tau))
                        || mabn.contains_ancestor(&mask, MabnNode::action(j, tau))
                });
                if hit {
                    set.insert(j);
                }
            }
        }
        sets.push(set);
    }
    Ok(ValueDependency { sets })
}

fn transpose_sets(sets: &[AgentSet]) -> Vec<AgentSet> {
    let n = sets.len();
    let mut out: Vec<AgentSet> = (0..n).map(|i| AgentSet::from([i])).collect();
    for (i, s) in sets.iter().enumerate() {
        for &j in s {
            out[j].insert(i);
        }
    }
    out
}

pub fn gradient_dependency(vd: &ValueDependency) -> GradientDependency {
    GradientDependency { sets: transpose_sets(&vd.sets) }
}

pub fn qhat_sets(vd: &ValueDependency, gd: &GradientDependency) -> Result<QhatIndex> {
    if vd.sets.len() != gd.sets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} value sets vs {} gradient sets",
            vd.sets.len(),
            gd.sets.len()
        )));
    }
    let sets = gd
        .sets
        .iter()
        .map(|gdi| gdi.iter().flat_map(|&j| vd.sets[j].iter().copied()).collect())
        .collect();
    Ok(QhatIndex { sets })
}

/// κ-truncated sets from bounded search on the folded network.
/// Membership is decided by the state node `s_j`, whose reach contains that of `a_j`.
pub fn kappa_dependency(folded: &FoldedMabn, kappa: usize) -> KappaDependency {
    let n = folded.n_agents();
    let sets = (0..n)
        .map(|i| {
            let mut s: AgentSet = folded
                .bounded_reach_sources(i, kappa)
                .into_iter()
                .map(|node| node.agent)
                .collect();
            s.insert(i);
            s
        })
        .collect();
    KappaDependency { kappa, sets }
}

/// Smallest κ whose truncated sets equal the κ+1 sets, with those sets.
pub fn kappa_saturation(folded: &FoldedMabn) -> KappaDependency {
    let mut k = 0;
    let mut cur = kappa_dependency(folded, 0);
    loop {
        let next = kappa_dependency(folded, k + 1);
        if next.sets == cur.sets {
            return cur;
        }
        cur = next;
        k += 1;
    }
}

/// Everything downstream code needs about one coupling structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencySets {
    pub i_q: Vec<AgentSet>,
    pub i_gd: Vec<AgentSet>,
    pub i_qhat: Vec<AgentSet>,
}

impl DependencySets {
    pub fn from_value_dependency(vd: &ValueDependency) -> Self {
        let gd = gradient_dependency(vd);
        let qh = qhat_sets(vd, &gd).expect("consistent sizes");
        Self { i_q: vd.sets.clone(), i_gd: gd.sets, i_qhat: qh.sets }
    }

    /// Exact time-invariant sets from the recursion fixed point.
    pub fn exact(idx: &IndexSets) -> Self {
        Self::from_value_dependency(&value_dependency_fixed_point(idx))
    }

    /// κ-truncated `I_Q` with the gradient sets transposed from it.
    pub fn kappa(idx: &IndexSets, kappa: usize) -> Self {
        let folded = FoldedMabn::build(idx);
        Self::from_value_dependency(&kappa_dependency(&folded, kappa).as_value_dependency())
    }
}

/// One row of the `deps` report, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepsRecord {
    pub agent: usize,
    #[serde(rename = "I_Q")]
    pub i_q: Vec<usize>,
    #[serde(rename = "I_GD")]
    pub i_gd: Vec<usize>,
    #[serde(rename = "I_Qhat")]
    pub i_qhat: Vec<usize>,
    pub kappa: Option<usize>,
    #[serde(rename = "I_Q_kappa")]
    pub i_q_kappa: Option<Vec<usize>>,
}

/// Per-agent report for a graph file; κ sets are added when `kappa` is given.
pub fn deps_records(g: &CouplingGraphs, kappa: Option<usize>) -> Result<Vec<DepsRecord>> {
    let idx = crate::coupling::derive_index_sets(g)?;
    let exact = DependencySets::exact(&idx);
    let kap = kappa.map(|k| kappa_dependency(&FoldedMabn::build(&idx), k));
    Ok((0..g.n_agents)
        .map(|i| DepsRecord {
            agent: i + 1,
            i_q: to_one_based(&exact.i_q[i]),
            i_gd: to_one_based(&exact.i_gd[i]),
            i_qhat: to_one_based(&exact.i_qhat[i]),
            kappa,
            i_q_kappa: kap.as_ref().map(|k| to_one_based(&k.sets[i])),
        })
        .collect())
}

/// `E_VD` as 1-based edges, self loops dropped.
pub fn vd_edges_one_based(vd: &ValueDependency) -> Vec<Edge> {
    vd.edges().into_iter().filter(|(j, i)| j != i).map(|(j, i)| (j + 1, i + 1)).collect()
}
