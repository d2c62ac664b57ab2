use std::collections::BTreeSet;

use structured_marl::coupling::{derive_index_sets, from_one_based, AgentSet, TimeVaryingIndexSets};
use structured_marl::dependency::{
    deps_records, kappa_dependency, u_sets, value_dependency, value_dependency_by_pathfinding,
    value_dependency_fixed_point, DependencySets,
};
use structured_marl::fixtures;
use structured_marl::mabn::{FoldedMabn, Mabn, MabnNode};

fn set(ids: &[usize]) -> AgentSet {
    from_one_based(ids)
}

#[test]
fn six_agent_index_sets() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    assert_eq!(idx.i_s[2], set(&[2, 3, 5]));
    assert_eq!(idx.i_o[1], set(&[1, 2]));
    for i in 0..6 {
        assert!(idx.i_s[i].contains(&i) && idx.i_o[i].contains(&i) && idx.i_r[i].contains(&i));
    }
}

#[test]
fn shipped_fixtures_validate() {
    for g in [fixtures::six_agent(), fixtures::warehouse9(), fixtures::warehouse40(), fixtures::thermal40()] {
        assert!(g.validate().is_valid());
    }
}

#[test]
fn six_agent_value_and_gradient_sets() {
    let d = DependencySets::exact(&derive_index_sets(&fixtures::six_agent()).unwrap());
    let expected_q = [
        set(&[1, 2]),
        set(&[1, 2]),
        set(&[1, 2, 3, 4, 5, 6]),
        set(&[1, 2, 3, 4, 5, 6]),
        set(&[5, 6]),
        set(&[5, 6]),
    ];
    assert_eq!(d.i_q, expected_q);
    assert_eq!(d.i_gd[0], set(&[1, 2, 3, 4]));
    assert_eq!(d.i_gd[2], set(&[3, 4]));
    assert_eq!(d.i_gd[4], set(&[3, 4, 5, 6]));
    assert_eq!(d.i_qhat[0], set(&[1, 2, 3, 4, 5, 6]));
    assert_eq!(d.i_qhat[4], set(&[1, 2, 3, 4, 5, 6]));
}

#[test]
fn six_agent_reach_sets_by_step() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    let horizon = 6;
    let u = u_sets(&TimeVaryingIndexSets::constant(&idx, horizon), 0, horizon).unwrap();
    assert_eq!(u[0][horizon], set(&[1]));
    assert_eq!(u[0][horizon - 1], set(&[1, 2]));
    for tau in 0..horizon - 1 {
        assert_eq!(u[0][tau], set(&[1, 2]));
    }
    assert_eq!(u[2][horizon], set(&[3, 4]));
    assert_eq!(u[2][horizon - 1], set(&[1, 2, 3, 4, 5, 6]));
}

#[test]
fn six_agent_edge_counts_per_layer() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    let m = Mabn::build_full(&TimeVaryingIndexSets::constant(&idx, 1), 1).unwrap();
    let edges = m.edges();
    let dynamics = edges.iter().filter(|(a, b)| a.time == 0 && b.time == 1).count();
    let obs = edges
        .iter()
        .filter(|(a, b)| a.time == 0 && b.time == 0 && b.kind == structured_marl::mabn::NodeKind::Action)
        .count();
    let reward = edges
        .iter()
        .filter(|(a, b)| a.time == 0 && b.kind == structured_marl::mabn::NodeKind::Optimality)
        .count();
    assert_eq!((dynamics, obs, reward), (22, 9, 18));
}

#[test]
fn state_reaches_but_action_does_not() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    let m = Mabn::build_full(&TimeVaryingIndexSets::constant(&idx, 1), 1).unwrap();
    assert!(m.reaches(MabnNode::state(0, 0), MabnNode::optimality(2, 1)).unwrap());
    assert!(!m.reaches(MabnNode::action(0, 0), MabnNode::optimality(2, 1)).unwrap());
}

#[test]
fn six_agent_folded_and_saturated_kappa() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    let f = FoldedMabn::build(&idx);
    assert_eq!(f.bidirectional_state_edges().len(), 6);
    let sources = f.bounded_reach_sources(2, 12);
    let agents: BTreeSet<usize> = sources.iter().map(|n| n.agent).collect();
    assert_eq!(agents, set(&[1, 2, 3, 4, 5, 6]));
    let k = kappa_dependency(&f, 12);
    assert_eq!(k.sets, value_dependency_fixed_point(&idx).sets);
}

#[test]
fn six_agent_pathfinding_matches_recursion() {
    let idx = derive_index_sets(&fixtures::six_agent()).unwrap();
    for horizon in 0..6 {
        let tv = TimeVaryingIndexSets::constant(&idx, horizon);
        let m = Mabn::build_full(&tv, horizon).unwrap();
        assert_eq!(
            value_dependency_by_pathfinding(&m, 0, horizon).unwrap(),
            value_dependency(&tv, 0, horizon).unwrap()
        );
    }
}

#[test]
fn warehouse40_is_complete_and_kappa2_is_sparse() {
    let idx = derive_index_sets(&fixtures::warehouse40()).unwrap();
    let vd = value_dependency_fixed_point(&idx);
    assert!(vd.is_complete());
    let k2 = kappa_dependency(&FoldedMabn::build(&idx), 2);
    for s in &k2.sets {
        assert_eq!(s.len(), 15);
    }
}

#[test]
fn thermal40_has_two_components() {
    let idx = derive_index_sets(&fixtures::thermal40()).unwrap();
    let vd = value_dependency_fixed_point(&idx);
    assert_eq!(vd.strongly_connected_components(), 2);
    let odd: AgentSet = (0..40).step_by(2).collect();
    assert_eq!(vd.sets[0], odd);
}

#[test]
fn warehouse9_structure() {
    let g = fixtures::warehouse9();
    assert_eq!(g.n_agents, 9);
    let idx = derive_index_sets(&g).unwrap();
    let d = DependencySets::exact(&idx);
    for i in 0..9 {
        assert!(d.i_q[i].is_subset(&d.i_qhat[i]));
    }
}

#[test]
fn deps_report_is_one_based_and_deterministic() {
    let g = fixtures::six_agent();
    let a = serde_json::to_string(&deps_records(&g, Some(1)).unwrap()).unwrap();
    let b = serde_json::to_string(&deps_records(&g, Some(1)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with(r#"[{"agent":1,"I_Q":[1,2],"I_GD":[1,2,3,4]"#), "{a}");
    let no_kappa = serde_json::to_string(&deps_records(&g, None).unwrap()).unwrap();
    assert!(no_kappa.contains(r#""kappa":null"#));
}
