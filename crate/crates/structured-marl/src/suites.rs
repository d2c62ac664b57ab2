//! Named verification suites with machine-readable verdicts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    marginal_qhat, mutation_check, pg_estimators, q_tables, required_agents, variance_lab_instance, verify_theorem1,
    verify_theorem2, Horizon, JointModel, NoiseModel, TabularPolicy, VarianceReport, INVARIANCE_TOL,
};
use crate::coupling::{derive_index_sets, AgentSet, CouplingGraphs, Edge, TimeVaryingIndexSets};
use crate::dependency::{
    gradient_dependency, kappa_dependency, kappa_saturation, qhat_sets, value_dependency, value_dependency_by_pathfinding,
    value_dependency_fixed_point, DependencySets, ValueDependency,
};
use crate::env::TabularPoscg;
use crate::error::{Error, Result};
use crate::mabn::{FoldedMabn, Mabn};
use crate::neural::{grad_check, Head, Mlp};

pub const SUITE_NAMES: [&str; 5] = ["theorem1", "theorem2", "theorem4", "dependency-oracles", "grad-check"];

/// Verdict of one suite. `details` carries suite-specific counters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub theorem: String,
    pub cases: usize,
    pub max_error: f64,
    pub passed: bool,
    pub details: Value,
}

/// Random directed edges over `1..=n`, each present with probability `p`, no self-loops.
pub fn random_edges(rng: &mut impl Rng, n: usize, p: f64) -> Vec<Edge> {
    let mut out = Vec::new();
    for j in 1..=n {
        for i in 1..=n {
            if i != j && rng.gen_bool(p) {
                out.push((j, i));
            }
        }
    }
    out
}

pub fn random_graphs(rng: &mut impl Rng, n: usize) -> CouplingGraphs {
    let p = [0.1, 0.25, 0.45][rng.gen_range(0..3)];
    let s = random_edges(rng, n, p);
    let o = random_edges(rng, n, p);
    let r = random_edges(rng, n, p);
    CouplingGraphs::new(n, s, o, r)
}

pub fn run_suite(name: &str, mutate: bool) -> Result<SuiteReport> {
    match name {
        "theorem1" => theorem1_suite(200, 3, 0x7431, mutate),
        "theorem2" => theorem2_suite(40, 0x7432),
        "theorem4" => theorem4_suite(&VarianceLabConfig::default()),
        "dependency-oracles" => dependency_oracle_suite(240, 0x7430),
        "grad-check" => grad_check_suite(0x7436),
        other => Err(Error::UnknownSuite(other.to_string())),
    }
}

fn finite_sets(g: &CouplingGraphs, horizon: usize) -> Result<(ValueDependency, Vec<AgentSet>)> {
    let idx = derive_index_sets(g)?;
    let vd = value_dependency(&TimeVaryingIndexSets::constant(&idx, horizon), 0, horizon)?;
    let gd = gradient_dependency(&vd).sets;
    Ok((vd, gd))
}

/// Invariance of `Q_i` outside `I_Q^i` on random three-agent binary games.
/// With `mutate`, each set loses its largest required agent first, so the
/// suite is expected to fail.
pub fn theorem1_suite(games: usize, horizon: usize, seed: u64, mutate: bool) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error = 0.0f64;
    let mut invariant = true;
    let mut required_inside = true;
    let (mut removals, mut detected, mut slack, mut slack_invariant) = (0, 0, 0, 0);
    for g_seed in 0..games as u64 {
        let graphs = random_graphs(&mut rng, 3);
        let game = TabularPoscg::random(graphs.clone(), vec![2; 3], vec![2; 3], horizon, seed ^ (g_seed << 8))?;
        let policy = TabularPolicy::random(&game, 1.5, g_seed);
        let model = JointModel::new(&game)?;
        let oracle = q_tables(&model, &policy, 0.9, Horizon::Finite(horizon))?;
        let (vd, _) = finite_sets(&graphs, horizon)?;
        let required = required_agents(game.index_sets(), horizon)?;
        required_inside &= required.iter().zip(&vd.sets).all(|(r, s)| r.is_subset(s));
        let sets: Vec<AgentSet> = if mutate {
            vd.sets
                .iter()
                .zip(&required)
                .map(|(s, r)| {
                    let mut s = s.clone();
                    if let Some(&j) = r.iter().next_back() {
                        s.remove(&j);
                    }
                    s
                })
                .collect()
        } else {
            vd.sets.clone()
        };
        let rep = verify_theorem1(&model, &oracle, &sets);
        max_error = max_error.max(rep.max_error);
        invariant &= rep.passed;
        let m = mutation_check(&model, &oracle, &vd.sets, &required);
        removals += m.required_removals;
        detected += m.detected;
        slack += m.slack_removals;
        slack_invariant += m.slack_removals_invariant;
    }
    let passed = invariant && required_inside && detected == removals;
    Ok(SuiteReport {
        theorem: "theorem1".into(),
        cases: games,
        max_error,
        passed,
        details: json!({
            "mutated": mutate,
            "tolerance": INVARIANCE_TOL,
            "required_within_sets": required_inside,
            "mutations": removals,
            "mutations_detected": detected,
            "slack_removals": slack,
            "slack_removals_invariant": slack_invariant,
        }),
    })
}

/// Finite-difference gradient decomposition plus the marginal identities on
/// random three-agent games and a tabular six-agent analogue.
pub fn theorem2_suite(games: usize, seed: u64) -> Result<SuiteReport> {
    let horizon = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::new();
    for g_seed in 0..games as u64 {
        instances.push((random_graphs(&mut rng, 3), g_seed));
    }
    instances.push((crate::fixtures::six_agent(), games as u64));
    let (mut cases, mut max_error, mut max_outside, mut max_marginal) = (0, 0.0f64, 0.0f64, 0.0f64);
    let mut passed = true;
    for (graphs, g_seed) in instances {
        let n = graphs.n_agents;
        let game = TabularPoscg::random(graphs.clone(), vec![2; n], vec![2; n], horizon, seed ^ (g_seed << 8))?;
        let policy = TabularPolicy::random(&game, 1.0, g_seed);
        let model = JointModel::new(&game)?;
        let (vd, gd) = finite_sets(&graphs, horizon)?;
        let rep = verify_theorem2(&model, &policy, &gd, 0.9, Horizon::Finite(horizon), 1e-5)?;
        cases += rep.cases;
        max_error = max_error.max(rep.max_error);
        max_outside = max_outside.max(rep.max_outside);
        passed &= rep.passed;
        let oracle = q_tables(&model, &policy, 0.9, Horizon::Finite(horizon))?;
        let qh = qhat_sets(&vd, &gradient_dependency(&vd))?;
        for i in 0..n {
            let m = marginal_qhat(&model, &policy, &oracle, i, &gd[i], &qh.sets[i]);
            max_marginal = max_marginal.max(m.constancy_error.max(m.remainder_action_error).max(m.marginal_error));
            passed &= m.passed;
        }
    }
    Ok(SuiteReport {
        theorem: "theorem2".into(),
        cases,
        max_error,
        passed,
        details: json!({
            "relative_tolerance": crate::analysis::GRADIENT_TOL,
            "max_outside_gradient": max_outside,
            "max_marginal_error": max_marginal,
        }),
    })
}

/// Settings of the variance lab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceLabConfig {
    pub seed: u64,
    /// 1-based agent whose estimators are compared.
    pub agent: usize,
    pub gamma: f64,
    pub samples: usize,
    pub mu_q: f64,
    pub sigma_q: f64,
    pub mu_qhat: f64,
    pub sigma_qhat: f64,
    /// Centre the isolated agent's reward under its policy.
    pub centred: bool,
}

impl Default for VarianceLabConfig {
    fn default() -> Self {
        Self { seed: 11, agent: 1, gamma: 0.9, samples: 100_000, mu_q: 0.0, sigma_q: 1.0, mu_qhat: 0.0, sigma_qhat: 0.5, centred: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceLabOutcome {
    pub config: VarianceLabConfig,
    /// `I_GD` and `I_Qhat` of the chosen agent, 1-based.
    pub gradient_set: Vec<usize>,
    pub qhat_set: Vec<usize>,
    pub report: VarianceReport,
    pub sign_holds: bool,
    pub within_bounds: bool,
}

pub fn run_variance_lab(cfg: &VarianceLabConfig) -> Result<VarianceLabOutcome> {
    if cfg.agent == 0 || cfg.agent > 3 {
        return Err(Error::Config(format!("agent {} is not in 1..=3", cfg.agent)));
    }
    let (game, policy) = variance_lab_instance(cfg.seed, cfg.centred)?;
    let model = JointModel::new(&game)?;
    let oracle = q_tables(&model, &policy, cfg.gamma, Horizon::Discounted)?;
    let sets = DependencySets::exact(game.index_sets());
    let i = cfg.agent - 1;
    let noise = NoiseModel { mu_q: cfg.mu_q, sigma_q: cfg.sigma_q, mu_qhat: cfg.mu_qhat, sigma_qhat: cfg.sigma_qhat };
    let report = pg_estimators(&model, &policy, &oracle, i, &sets.i_gd[i], &sets.i_qhat[i], noise, cfg.samples, cfg.seed)?;
    let sign_holds = report.lower_confidence >= 0.0;
    let within_bounds = report.difference >= report.lower_bound - report.half_width
        && report.difference <= report.upper_bound + report.half_width;
    Ok(VarianceLabOutcome {
        config: cfg.clone(),
        gradient_set: sets.i_gd[i].iter().map(|j| j + 1).collect(),
        qhat_set: sets.i_qhat[i].iter().map(|j| j + 1).collect(),
        report,
        sign_holds,
        within_bounds,
    })
}

/// The variance lab plus a null case where both estimators use the global critic.
pub fn theorem4_suite(cfg: &VarianceLabConfig) -> Result<SuiteReport> {
    let out = run_variance_lab(cfg)?;
    let (game, policy) = variance_lab_instance(cfg.seed, cfg.centred)?;
    let model = JointModel::new(&game)?;
    let oracle = q_tables(&model, &policy, cfg.gamma, Horizon::Discounted)?;
    let all: AgentSet = (0..3).collect();
    let same = NoiseModel { mu_q: 0.0, sigma_q: cfg.sigma_q, mu_qhat: 0.0, sigma_qhat: cfg.sigma_q };
    let same_critic = pg_estimators(&model, &policy, &oracle, cfg.agent - 1, &all, &all, same, cfg.samples, cfg.seed + 1)?;
    let null_ok = same_critic.difference.abs() <= same_critic.half_width;
    let r = &out.report;
    let lower_slack = (r.lower_bound - r.half_width - r.difference).max(0.0);
    let upper_slack = (r.difference - r.upper_bound - r.half_width).max(0.0);
    Ok(SuiteReport {
        theorem: "theorem4".into(),
        cases: 2,
        max_error: lower_slack.max(upper_slack),
        passed: out.sign_holds && out.within_bounds && null_ok,
        details: json!({
            "samples": r.samples,
            "difference": r.difference,
            "half_width": r.half_width,
            "lower_confidence": r.lower_confidence,
            "exact_difference": r.exact_difference,
            "lower_bound": r.lower_bound,
            "upper_bound": r.upper_bound,
            "null_difference": same_critic.difference,
            "null_half_width": same_critic.half_width,
        }),
    })
}

/// Recursion, path search on the full network, κ on the folded network and
/// κ-saturation against the fixed point, on random time-invariant graphs.
pub fn dependency_oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=8);
        let horizon = rng.gen_range(0..=6);
        let g = random_graphs(&mut rng, n);
        let idx = derive_index_sets(&g)?;
        let tv = TimeVaryingIndexSets::constant(&idx, horizon);
        let recursion = value_dependency(&tv, 0, horizon)?;
        let paths = value_dependency_by_pathfinding(&Mabn::build_full(&tv, horizon)?, 0, horizon)?;
        let folded = FoldedMabn::build(&idx);
        let mut ok = recursion == paths;
        if horizon >= 1 {
            ok &= kappa_dependency(&folded, horizon - 1).sets == recursion.sets;
        }
        ok &= kappa_saturation(&folded).sets == value_dependency_fixed_point(&idx).sets;
        if !ok {
            mismatches += 1;
        }
    }
    Ok(SuiteReport {
        theorem: "dependency-oracles".into(),
        cases,
        max_error: mismatches as f64,
        passed: mismatches == 0,
        details: json!({ "mismatches": mismatches }),
    })
}

/// Back-propagation against central differences for every head at f64.
pub fn grad_check_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for draw in 0..8usize {
        for head in [Head::Softmax, Head::Tanh, Head::Linear] {
            let (inp, out) = (2 + draw % 5, 1 + draw % 3);
            let net = Mlp::<f64>::init_glorot(&[inp, 32, 32, out], head, 2.0, seed + (draw * 3) as u64);
            let x: Vec<f64> = (0..inp).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let up: Vec<f64> = (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            worst = worst.max(grad_check(&net, &x, &up, 1e-5)?);
            cases += 1;
        }
    }
    Ok(SuiteReport {
        theorem: "grad-check".into(),
        cases,
        max_error: worst,
        passed: worst <= 1e-4,
        details: json!({ "tolerance": 1e-4, "step": 1e-5 }),
    })
}
