//! Randomized cross-checks for coupling, network construction and dependency sets.

use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use structured_marl::coupling::{
    derive_index_sets, transpose_edges, AgentSet, CouplingGraphs, Edge, IndexSets, TimeVaryingIndexSets,
};
use structured_marl::dependency::{
    gradient_dependency, kappa_dependency, kappa_saturation, qhat_sets, u_sets, value_dependency,
    value_dependency_by_pathfinding, value_dependency_fixed_point,
};
use structured_marl::mabn::{FoldedMabn, Mabn, MabnNode, NodeKind};

fn edge_set(n: usize) -> impl Strategy<Value = Vec<Edge>> {
    proptest::collection::vec(any::<bool>(), n * n).prop_map(move |bits| {
        let mut out = Vec::new();
        for (k, on) in bits.into_iter().enumerate() {
            let (j, i) = (k / n + 1, k % n + 1);
            if on && i != j {
                out.push((j, i));
            }
        }
        out
    })
}

fn sparse_edge_set(n: usize) -> impl Strategy<Value = Vec<Edge>> {
    proptest::collection::vec(0u8..4, n * n).prop_map(move |bits| {
        let mut out = Vec::new();
        for (k, v) in bits.into_iter().enumerate() {
            let (j, i) = (k / n + 1, k % n + 1);
            if v == 0 && i != j {
                out.push((j, i));
            }
        }
        out
    })
}

fn graphs(max_n: usize) -> impl Strategy<Value = CouplingGraphs> {
    (1..=max_n).prop_flat_map(|n| {
        (sparse_edge_set(n), sparse_edge_set(n), sparse_edge_set(n))
            .prop_map(move |(s, o, r)| CouplingGraphs::new(n, s, o, r))
    })
}

/// Straightforward edge generator written from the construction rules and the
/// raw edge lists, independent of the library's index-set plumbing.
fn reference_edges(g: &CouplingGraphs, horizon: usize) -> Vec<(MabnNode, MabnNode)> {
    let n = g.n_agents;
    let in_or_self = |edges: &[Edge], i: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (1..=n).filter(|&j| j == i || edges.contains(&(j, i))).collect();
        v.dedup();
        v
    };
    let mut out = BTreeSet::new();
    for t in 0..=horizon {
        for i in 1..=n {
            for j in in_or_self(&g.edges_obs, i) {
                out.insert((MabnNode::state(j - 1, t), MabnNode::action(i - 1, t)));
            }
            for j in in_or_self(&g.edges_reward, i) {
                out.insert((MabnNode::state(j - 1, t), MabnNode::optimality(i - 1, t)));
                out.insert((MabnNode::action(j - 1, t), MabnNode::optimality(i - 1, t)));
            }
            if t < horizon {
                for j in in_or_self(&g.edges_state, i) {
                    out.insert((MabnNode::state(j - 1, t), MabnNode::state(i - 1, t + 1)));
                    out.insert((MabnNode::action(j - 1, t), MabnNode::state(i - 1, t + 1)));
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Independent breadth-first path-search route over the reference edge list.
fn reference_value_sets(g: &CouplingGraphs, horizon: usize) -> Vec<AgentSet> {
    let edges = reference_edges(g, horizon);
    let n = g.n_agents;
    (0..n)
        .map(|i| {
            let mut reached: BTreeSet<MabnNode> = BTreeSet::new();
            let mut queue: VecDeque<MabnNode> =
                (0..=horizon).map(|t| MabnNode::optimality(i, t)).collect();
            reached.extend(queue.iter().copied());
            while let Some(node) = queue.pop_front() {
                for &(a, b) in &edges {
                    if b == node && reached.insert(a) {
                        queue.push_back(a);
                    }
                }
            }
            let mut s: AgentSet = reached
                .iter()
                .filter(|x| x.kind != NodeKind::Optimality)
                .map(|x| x.agent)
                .collect();
            s.insert(i);
            s
        })
        .collect()
}

fn idx_of(g: &CouplingGraphs) -> IndexSets {
    derive_index_sets(g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn transpose_is_an_involution(edges in (1usize..8).prop_flat_map(edge_set)) {
        let mut sorted = edges.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(transpose_edges(&transpose_edges(&edges)), sorted);
    }

    #[test]
    fn index_sets_are_pure_and_self_inclusive(g in graphs(8)) {
        let a = idx_of(&g);
        let b = idx_of(&g.clone());
        prop_assert_eq!(&a, &b);
        for i in 0..g.n_agents {
            prop_assert!(a.i_s[i].contains(&i) && a.i_o[i].contains(&i) && a.i_r[i].contains(&i));
        }
    }

    #[test]
    fn full_network_matches_reference_and_is_acyclic(g in graphs(6), horizon in 0usize..4) {
        let idx = idx_of(&g);
        let m = Mabn::build_full(&TimeVaryingIndexSets::constant(&idx, horizon), horizon).unwrap();
        prop_assert_eq!(m.edges(), reference_edges(&g, horizon));
        prop_assert!(m.is_acyclic());
        for i in 0..g.n_agents {
            for t in 0..=horizon {
                prop_assert!(m.successors(MabnNode::optimality(i, t)).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn unfolding_reproduces_full_network(g in graphs(6), horizon in 0usize..5) {
        let idx = idx_of(&g);
        let folded = FoldedMabn::build(&idx);
        prop_assert!(folded.without_backward_edges().is_acyclic());
        let full = Mabn::build_full(&TimeVaryingIndexSets::constant(&idx, horizon), horizon).unwrap();
        prop_assert_eq!(folded.unfold(horizon).edges(), full.edges());
    }

    #[test]
    fn bounded_folded_search_matches_full_search(g in graphs(8), kappa in 0usize..=5) {
        let idx = idx_of(&g);
        let folded = FoldedMabn::build(&idx);
        let horizon = kappa + 1;
        let full = Mabn::build_full(&TimeVaryingIndexSets::constant(&idx, horizon), horizon).unwrap();
        for i in 0..g.n_agents {
            let targets: Vec<MabnNode> = (0..=horizon).map(|t| MabnNode::optimality(i, t)).collect();
            let mask = full.ancestors_of(&targets).unwrap();
            let expected: BTreeSet<MabnNode> = (0..g.n_agents)
                .flat_map(|j| [MabnNode::state(j, 0), MabnNode::action(j, 0)])
                .filter(|&node| full.contains_ancestor(&mask, node))
                .collect();
            prop_assert_eq!(folded.bounded_reach_sources(i, kappa), expected);
        }
    }

    #[test]
    fn kappa_sets_grow_and_stay_inside_exact(g in graphs(8)) {
        let idx = idx_of(&g);
        let folded = FoldedMabn::build(&idx);
        let exact = value_dependency_fixed_point(&idx).edges();
        let mut prev = kappa_dependency(&folded, 0).edges();
        for k in 1..=6 {
            let cur = kappa_dependency(&folded, k).edges();
            prop_assert!(prev.is_subset(&cur));
            prop_assert!(cur.is_subset(&exact));
            prev = cur;
        }
    }

    #[test]
    fn horizon_growth_is_monotone(g in graphs(8), horizon in 0usize..6) {
        let idx = idx_of(&g);
        let a = value_dependency(&TimeVaryingIndexSets::constant(&idx, horizon), 0, horizon).unwrap();
        let b = value_dependency(&TimeVaryingIndexSets::constant(&idx, horizon + 1), 0, horizon + 1).unwrap();
        for i in 0..g.n_agents {
            prop_assert!(a.sets[i].is_subset(&b.sets[i]));
        }
    }

    #[test]
    fn later_reach_sets_sit_inside_earlier_ones(g in graphs(8), horizon in 1usize..6) {
        let idx = idx_of(&g);
        let u = u_sets(&TimeVaryingIndexSets::constant(&idx, horizon), 0, horizon).unwrap();
        for seq in &u {
            for tau in 0..horizon {
                prop_assert!(seq[tau + 1].is_subset(&seq[tau]));
            }
        }
    }

    #[test]
    fn gradient_sets_transpose_value_sets(g in graphs(8)) {
        let vd = value_dependency_fixed_point(&idx_of(&g));
        let gd = gradient_dependency(&vd);
        let flipped: BTreeSet<(usize, usize)> = vd.edges().into_iter().map(|(j, i)| (i, j)).collect();
        let gd_edges: BTreeSet<(usize, usize)> = gd
            .sets
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (j, i)))
            .collect();
        prop_assert_eq!(gd_edges, flipped);
        let back = gradient_dependency(&structured_marl::dependency::ValueDependency { sets: gd.sets.clone() });
        prop_assert_eq!(back.sets, vd.sets.clone());
        let qh = qhat_sets(&vd, &gd).unwrap();
        for i in 0..g.n_agents {
            prop_assert!(vd.sets[i].is_subset(&qh.sets[i]));
            prop_assert!(gd.sets[i].contains(&i));
        }
    }
}

/// Three routes to `I_Q` agree on 240 random time-invariant cases.
#[test]
fn three_routes_agree() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(240));
    let strategy = (graphs(8), 0usize..=6);
    runner
        .run(&strategy, |(g, horizon)| {
            let idx = idx_of(&g);
            let tv = TimeVaryingIndexSets::constant(&idx, horizon);
            let recursion = value_dependency(&tv, 0, horizon).unwrap();
            let full = Mabn::build_full(&tv, horizon).unwrap();
            let paths = value_dependency_by_pathfinding(&full, 0, horizon).unwrap();
            prop_assert_eq!(&recursion, &paths);
            prop_assert_eq!(&recursion.sets, &reference_value_sets(&g, horizon));
            let folded = FoldedMabn::build(&idx);
            if horizon >= 1 {
                prop_assert_eq!(&kappa_dependency(&folded, horizon - 1).sets, &recursion.sets);
            }
            let saturated = kappa_saturation(&folded);
            prop_assert_eq!(&saturated.sets, &value_dependency_fixed_point(&idx).sets);
            Ok(())
        })
        .unwrap();
}

/// The forward containment `U^t ⊆ U^{t+1}` does not hold in general even when
/// every rewarded agent is state-driven: the six-agent fixture is a counterexample.
#[test]
fn forward_containment_counterexample() {
    let idx = derive_index_sets(&structured_marl::fixtures::six_agent()).unwrap();
    let horizon = 3;
    let u = u_sets(&TimeVaryingIndexSets::constant(&idx, horizon), 0, horizon).unwrap();
    let agent = 2;
    let condition = idx.i_r[agent]
        .iter()
        .all(|j| idx.i_r[agent].iter().any(|&k| idx.i_s[k].contains(j)));
    assert!(condition);
    assert!(!u[agent][horizon - 1].is_subset(&u[agent][horizon]));
}
