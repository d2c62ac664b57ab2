//! Exact oracles on small tabular games: action-value tables by exhaustive
//! expectation, invariance and gradient checks for the decompositions, and
//! Monte-Carlo estimates of policy-gradient variances.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::coupling::{AgentSet, CouplingGraphs, IndexSets, TimeVaryingIndexSets};
use crate::env::EnvModel;
use crate::env::tabular::{decode, tabular_enumerate, TabularPoscg, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::mabn::{Mabn, MabnNode, NodeKind};

/// Tolerance of the exact invariance checks.
pub const INVARIANCE_TOL: f64 = 1e-10;

/// Softmax policies over per-agent logits indexed by (observation, action).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    /// `logits[i][obs * n_actions[i] + a]`.
    pub logits: Vec<Vec<f64>>,
    pub n_actions: Vec<usize>,
}

impl TabularPolicy {
    pub fn uniform(game: &TabularPoscg) -> Self {
        let logits = (0..game.n_agents())
            .map(|i| vec![0.0; game.obs_count(i) * game.n_actions[i]])
            .collect();
        Self { logits, n_actions: game.n_actions.clone() }
    }

    /// Logits uniform in `[-scale, scale]`.
    pub fn random(game: &TabularPoscg, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::uniform(game);
        for row in &mut p.logits {
            for x in row.iter_mut() {
                *x = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    pub fn param_count(&self, i: usize) -> usize {
        self.logits[i].len()
    }

    pub fn probs(&self, i: usize, obs: usize) -> Vec<f64> {
        let k = self.n_actions[i];
        let row = &self.logits[i][obs * k..(obs + 1) * k];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect()
    }

    /// `∇_{θ_i} ln π_i(a | obs)`: `e_a − π(·|obs)` in the row of `obs`, zero elsewhere.
    pub fn score(&self, i: usize, obs: usize, a: usize) -> Vec<f64> {
        let k = self.n_actions[i];
        let mut g = vec![0.0; self.logits[i].len()];
        for (b, p) in self.probs(i, obs).into_iter().enumerate() {
            g[obs * k + b] = if b == a { 1.0 - p } else { -p };
        }
        g
    }

    pub fn perturbed(&self, i: usize, k: usize, h: f64) -> Self {
        let mut p = self.clone();
        p.logits[i][k] += h;
        p
    }
}

/// Dense joint model of a tabular game.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub n_agents: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<usize>>,
    /// `obs[s][i]`: observation index of agent `i` in joint state `s`.
    pub obs: Vec<Vec<usize>>,
    /// `p[(s * n_actions + a) * n_states + s']`.
    pub p: Vec<f64>,
    /// `r[i][s * n_actions + a]`.
    pub r: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
}

impl JointModel {
    pub fn new(game: &TabularPoscg) -> Result<Self> {
        Self::with_cap(game, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(game: &TabularPoscg, cap: u128) -> Result<Self> {
        let pairs = tabular_enumerate(game, cap)?;
        let n = game.n_agents();
        let (ns, na) = (game.joint_state_count(), game.joint_action_count());
        let states: Vec<Vec<usize>> = (0..ns).map(|k| decode(k, &game.n_states)).collect();
        let actions: Vec<Vec<usize>> = (0..na).map(|k| decode(k, &game.n_actions)).collect();
        let obs = states.iter().map(|s| (0..n).map(|i| game.obs_index(i, s)).collect()).collect();
        let mut p = vec![0.0; ns * na * ns];
        let mut r = vec![vec![0.0; ns * na]; n];
        for (k, (s, a)) in pairs.enumerate() {
            for (i, ri) in r.iter_mut().enumerate() {
                ri[k] = game.reward_of(i, &s, &a);
            }
            let rows: Vec<&[f64]> = (0..n).map(|i| game.transition_row(i, &s, &a)).collect();
            for (next, sn) in states.iter().enumerate() {
                p[k * ns + next] = sn.iter().enumerate().map(|(i, &x)| rows[i][x]).product();
            }
        }
        let mu0 = states.iter().map(|s| game.initial_probability(s)).collect();
        Ok(Self { n_agents: n, n_states: ns, n_actions: na, states, actions, obs, p, r, mu0 })
    }

    /// `π(a | s)` for every joint pair, indexed like the reward tables.
    pub fn joint_policy(&self, policy: &TabularPolicy) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            let per: Vec<Vec<f64>> = (0..self.n_agents).map(|i| policy.probs(i, self.obs[s][i])).collect();
            for (a, acts) in self.actions.iter().enumerate() {
                out[s * self.n_actions + a] = acts.iter().enumerate().map(|(i, &x)| per[i][x]).product();
            }
        }
        out
    }

    fn expect_next(&self, pi: &[f64], q: &[f64]) -> Vec<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| pi[s * na + a] * q[s * na + a]).sum()).collect();
        (0..ns * na)
            .map(|k| self.p[k * ns..(k + 1) * ns].iter().zip(&v).map(|(p, v)| p * v).sum())
            .collect()
    }

    /// Normalized discounted occupancy `(1−γ) Σ_t γ^t P(s_t = s)` from `mu0`.
    pub fn discounted_occupancy(&self, pi: &[f64], gamma: f64) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("occupancy needs 0 ≤ γ < 1, got {gamma}")));
        }
        let (ns, na) = (self.n_states, self.n_actions);
        let mut d = self.mu0.clone();
        for _ in 0..100_000 {
            let mut next: Vec<f64> = self.mu0.iter().map(|m| (1.0 - gamma) * m).collect();
            for s in 0..ns {
                for a in 0..na {
                    let w = gamma * d[s] * pi[s * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    let k = s * na + a;
                    for (t, p) in next.iter_mut().zip(&self.p[k * ns..(k + 1) * ns]) {
                        *t += w * p;
                    }
                }
            }
            let change = next.iter().zip(&d).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            d = next;
            if change <= 1e-16 {
                break;
            }
        }
        Ok(d)
    }
}

/// Finite horizon `T` (one reward per step `0..=T`) or infinite discounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(usize),
    Discounted,
}

/// Exact per-agent action-value tables.
#[derive(Clone, Debug, PartialEq)]
pub struct QOracle {
    /// `q[i][s * n_actions + a]`.
    pub q: Vec<Vec<f64>>,
    pub gamma: f64,
    pub horizon: Horizon,
}

impl QOracle {
    pub fn global(&self) -> Vec<f64> {
        sum_tables(&self.q, 0..self.q.len())
    }

    pub fn sum_over(&self, agents: impl IntoIterator<Item = usize>) -> Vec<f64> {
        sum_tables(&self.q, agents)
    }
}

fn sum_tables(q: &[Vec<f64>], agents: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut out = vec![0.0; q[0].len()];
    for j in agents {
        for (o, v) in out.iter_mut().zip(&q[j]) {
            *o += v;
        }
    }
    out
}

/// `Q_i^h = r_i + γ E[Q_i^{h−1}(s', a')]` with `Q_i^0 = r_i`; the discounted
/// case iterates to a fixed point.
pub fn q_tables(model: &JointModel, policy: &TabularPolicy, gamma: f64, horizon: Horizon) -> Result<QOracle> {
    let pi = model.joint_policy(policy);
    let mut q = Vec::with_capacity(model.n_agents);
    for r in &model.r {
        let table = match horizon {
            Horizon::Finite(t) => {
                let mut cur = r.clone();
                for _ in 0..t {
                    let next = model.expect_next(&pi, &cur);
                    cur = r.iter().zip(next).map(|(r, e)| r + gamma * e).collect();
                }
                cur
            }
            Horizon::Discounted => {
                if !(0.0..1.0).contains(&gamma) {
                    return Err(Error::Config(format!("discounted values need 0 ≤ γ < 1, got {gamma}")));
                }
                let scale = r.iter().fold(1.0f64, |m, x| m.max(x.abs())) / (1.0 - gamma);
                let mut cur = r.clone();
                for _ in 0..100_000 {
                    let next = model.expect_next(&pi, &cur);
                    let upd: Vec<f64> = r.iter().zip(next).map(|(r, e)| r + gamma * e).collect();
                    let change = upd.iter().zip(&cur).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                    cur = upd;
                    if change <= 1e-15 * scale {
                        break;
                    }
                }
                cur
            }
        };
        q.push(table);
    }
    Ok(QOracle { q, gamma, horizon })
}

pub fn brute_force_q(game: &TabularPoscg, policy: &TabularPolicy, gamma: f64, horizon: Horizon) -> Result<QOracle> {
    q_tables(&JointModel::new(game)?, policy, gamma, horizon)
}

/// Largest spread of `table` among pairs agreeing on the states and actions of `set`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Deviation {
    pub max: f64,
    /// Joint `(s, a)` indices of the extreme pair of the worst group.
    pub witness: Option<((usize, usize), (usize, usize))>,
}

pub fn invariance_deviation(model: &JointModel, table: &[f64], set: &AgentSet) -> Deviation {
    let na = model.n_actions;
    let mut groups: BTreeMap<Vec<usize>, (f64, usize, f64, usize)> = BTreeMap::new();
    for s in 0..model.n_states {
        for a in 0..na {
            let key: Vec<usize> = set
                .iter()
                .flat_map(|&j| [model.states[s][j], model.actions[a][j]])
                .collect();
            let k = s * na + a;
            let v = table[k];
            let e = groups.entry(key).or_insert((v, k, v, k));
            if v < e.0 {
                e.0 = v;
                e.1 = k;
            }
            if v > e.2 {
                e.2 = v;
                e.3 = k;
            }
        }
    }
    let mut best = Deviation { max: 0.0, witness: None };
    for (lo, klo, hi, khi) in groups.into_values() {
        if hi - lo > best.max {
            best = Deviation { max: hi - lo, witness: Some(((klo / na, klo % na), (khi / na, khi % na))) };
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceReport {
    /// Per agent deviation of `Q_i` outside its set.
    pub deviations: Vec<Deviation>,
    pub max_error: f64,
    pub passed: bool,
}

/// `Q_i` must not vary with coordinates outside `sets[i]`.
pub fn verify_theorem1(model: &JointModel, oracle: &QOracle, sets: &[AgentSet]) -> InvarianceReport {
    let deviations: Vec<Deviation> = sets.iter().enumerate().map(|(i, s)| invariance_deviation(model, &oracle.q[i], s)).collect();
    let max_error = deviations.iter().fold(0.0f64, |m, d| m.max(d.max));
    InvarianceReport { deviations, max_error, passed: max_error <= INVARIANCE_TOL }
}

/// Agents that `Q_i` over `0..=horizon` can depend on once `(s(0), a(0))` is fixed:
/// `s_j(0)` or `a_j(0)` reaches some `Z_i(τ)` along a path whose interior avoids
/// the conditioned time-0 actions.
pub fn required_agents(idx: &IndexSets, horizon: usize) -> Result<Vec<AgentSet>> {
    let m = Mabn::build_full(&TimeVaryingIndexSets::constant(idx, horizon), horizon)?;
    let n = idx.i_s.len();
    let mut out = vec![AgentSet::new(); n];
    for j in 0..n {
        for source in [MabnNode::state(j, 0), MabnNode::action(j, 0)] {
            let mut seen = BTreeSet::from([source]);
            let mut queue = VecDeque::from([source]);
            while let Some(node) = queue.pop_front() {
                if node.kind == NodeKind::Optimality {
                    out[node.agent].insert(j);
                    continue;
                }
                if node != source && node.kind == NodeKind::Action && node.time == 0 {
                    continue;
                }
                for next in m.successors(node)? {
                    if seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MutationReport {
    /// Removals of a required agent.
    pub required_removals: usize,
    /// Of those, removals whose invariance check failed.
    pub detected: usize,
    /// Removals of agents outside the required set that kept invariance.
    pub slack_removals_invariant: usize,
    pub slack_removals: usize,
    /// `(agent, removed)` pairs, 0-based, that escaped detection.
    pub undetected: Vec<(usize, usize)>,
}

/// Removes each member of each set in turn and re-runs the invariance check.
pub fn mutation_check(model: &JointModel, oracle: &QOracle, sets: &[AgentSet], required: &[AgentSet]) -> MutationReport {
    let mut rep = MutationReport::default();
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            let mut shrunk = set.clone();
            shrunk.remove(&j);
            let dev = invariance_deviation(model, &oracle.q[i], &shrunk).max;
            if required[i].contains(&j) {
                rep.required_removals += 1;
                if dev > INVARIANCE_TOL {
                    rep.detected += 1;
                } else {
                    rep.undetected.push((i, j));
                }
            } else {
                rep.slack_removals += 1;
                if dev <= INVARIANCE_TOL {
                    rep.slack_removals_invariant += 1;
                }
            }
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    /// Number of `(agent, parameter)` perturbations.
    pub cases: usize,
    /// Largest `|∇Q − ∇Σ_{GD} Q_j| / max(1, |∇Q|, |∇Σ_{GD} Q_j|)`.
    pub max_error: f64,
    /// Largest `|∇ Σ_{j∉GD} Q_j|`.
    pub max_outside: f64,
    pub passed: bool,
}

/// Relative tolerance of the gradient decomposition check.
pub const GRADIENT_TOL: f64 = 1e-6;
/// Absolute tolerance on gradients of values outside the gradient set.
pub const OUTSIDE_TOL: f64 = 1e-8;

/// Central differences of the global value against the sum over `gd[i]`.
pub fn verify_theorem2(model: &JointModel, policy: &TabularPolicy, gd: &[AgentSet], gamma: f64, horizon: Horizon, h: f64) -> Result<GradientReport> {
    let n = model.n_agents;
    let mut rep = GradientReport { cases: 0, max_error: 0.0, max_outside: 0.0, passed: true };
    for i in 0..n {
        for k in 0..policy.param_count(i) {
            let plus = q_tables(model, &policy.perturbed(i, k, h), gamma, horizon)?;
            let minus = q_tables(model, &policy.perturbed(i, k, -h), gamma, horizon)?;
            let diff = |agents: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
                let set: Vec<usize> = agents.collect();
                let p = plus.sum_over(set.iter().copied());
                let m = minus.sum_over(set.iter().copied());
                p.iter().zip(m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            };
            let full = diff(&mut (0..n));
            let part = diff(&mut gd[i].iter().copied());
            let outside = diff(&mut (0..n).filter(|j| !gd[i].contains(j)));
            for ((f, p), o) in full.iter().zip(&part).zip(&outside) {
                let err = (f - p).abs() / 1f64.max(f.abs()).max(p.abs());
                rep.max_error = rep.max_error.max(err);
                rep.max_outside = rep.max_outside.max(o.abs());
            }
            rep.cases += 1;
        }
    }
    rep.passed = rep.max_error <= GRADIENT_TOL && rep.max_outside <= OUTSIDE_TOL;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalReport {
    pub agent: usize,
    /// Spread of `Q̂_i` among pairs agreeing on `I_Qhat^i`.
    pub constancy_error: f64,
    /// Largest change of `Q − Q̂_i` when only `a_i` varies.
    pub remainder_action_error: f64,
    /// Largest `|Q̂_i(s,a) − E_{ā∼π}[Q̂_i(s,a)]|` with `ā` the actions outside `I_Qhat^i`.
    pub marginal_error: f64,
    pub passed: bool,
}

/// `Q̂_i = Σ_{j∈gd} Q_j` and its marginalization checks.
pub fn marginal_qhat(model: &JointModel, policy: &TabularPolicy, oracle: &QOracle, i: usize, gd: &AgentSet, qhat: &AgentSet) -> MarginalReport {
    let na = model.n_actions;
    let qh = oracle.sum_over(gd.iter().copied());
    let remainder = oracle.sum_over((0..model.n_agents).filter(|j| !gd.contains(j)));
    let constancy_error = invariance_deviation(model, &qh, qhat).max;
    let mut remainder_action_error = 0.0f64;
    let mut marginal_error = 0.0f64;
    let outside: Vec<usize> = (0..model.n_agents).filter(|j| !qhat.contains(j)).collect();
    for s in 0..model.n_states {
        let probs: Vec<Vec<f64>> = (0..model.n_agents).map(|k| policy.probs(k, model.obs[s][k])).collect();
        for a in 0..na {
            let acts = &model.actions[a];
            for b in 0..na {
                let other = &model.actions[b];
                let only_i = (0..model.n_agents).all(|k| k == i || other[k] == acts[k]);
                if only_i {
                    remainder_action_error = remainder_action_error.max((remainder[s * na + a] - remainder[s * na + b]).abs());
                }
            }
            let mut expect = 0.0;
            for (b, other) in model.actions.iter().enumerate() {
                if (0..model.n_agents).any(|k| qhat.contains(&k) && other[k] != acts[k]) {
                    continue;
                }
                let w: f64 = outside.iter().map(|&k| probs[k][other[k]]).product();
                expect += w * qh[s * na + b];
            }
            marginal_error = marginal_error.max((qh[s * na + a] - expect).abs());
        }
    }
    MarginalReport {
        agent: i,
        constancy_error,
        remainder_action_error,
        marginal_error,
        passed: constancy_error <= INVARIANCE_TOL && remainder_action_error <= INVARIANCE_TOL && marginal_error <= INVARIANCE_TOL,
    }
}

/// Laws of the injected critic errors `δ_Q`, `δ_Q̂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mu_q: f64,
    pub sigma_q: f64,
    pub mu_qhat: f64,
    pub sigma_qhat: f64,
}

/// One-sided 99% normal quantile.
pub const Z_ONE_SIDED_99: f64 = 2.326;
/// Two-sided 99% normal quantile.
pub const Z_TWO_SIDED_99: f64 = 2.576;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub agent: usize,
    pub samples: usize,
    pub noise: NoiseModel,
    pub tvar_c: f64,
    pub tvar_q: f64,
    /// Empirical `tVar(g_C) − tVar(g_Q)`.
    pub difference: f64,
    pub std_error: f64,
    /// Two-sided 99% half-width of `difference`.
    pub half_width: f64,
    /// One-sided 99% lower confidence limit of `difference`.
    pub lower_confidence: f64,
    /// Exact difference by enumeration.
    pub exact_difference: f64,
    pub exact_tvar_c: f64,
    pub exact_tvar_q: f64,
    /// `sup ||∇ ln π_i||`.
    pub m_i: f64,
    /// `inf ||∇ ln π_i||`.
    pub n_i: f64,
    /// `(j, ε_j)` for agents outside `I_Qhat^i`, 0-based.
    pub epsilon: Vec<(usize, f64)>,
    pub mean_sq_score: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Exact expectations under `s ∼ d`, `a ∼ π` for the estimators of agent `i`.
struct Moments {
    d: Vec<f64>,
    pi: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte-Carlo and exact total variances of the global-critic and
/// decomposed-critic score-function estimators of agent `i`.
#[allow(clippy::too_many_arguments)]
pub fn pg_estimators(
    model: &JointModel,
    policy: &TabularPolicy,
    oracle: &QOracle,
    i: usize,
    gd: &AgentSet,
    qhat: &AgentSet,
    noise: NoiseModel,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if oracle.horizon != Horizon::Discounted {
        return Err(Error::Config("variance lab needs discounted values".into()));
    }
    if n_samples < 2 || noise.sigma_q < 0.0 || noise.sigma_qhat < 0.0 {
        return Err(Error::Config("need ≥ 2 samples and nonnegative noise scales".into()));
    }
    let na = model.n_actions;
    let mom = Moments { pi: model.joint_policy(policy), d: Vec::new() };
    let mom = Moments { d: model.discounted_occupancy(&mom.pi, oracle.gamma)?, ..mom };
    let q = oracle.global();
    let qh = oracle.sum_over(gd.iter().copied());
    let dim = policy.param_count(i);
    let score_of = |s: usize, a: usize| policy.score(i, model.obs[s][i], model.actions[a][i]);

    let (mut e_c2, mut e_q2, mut e_sq) = (0.0, 0.0, 0.0);
    let mut mean_c = vec![0.0; dim];
    let mut mean_q = vec![0.0; dim];
    let (mut m_i, mut n_i) = (0.0f64, f64::INFINITY);
    let outside: Vec<usize> = (0..model.n_agents).filter(|j| !qhat.contains(j)).collect();
    let tail = oracle.sum_over(outside.iter().copied());
    let mut lower_first = 0.0;
    for s in 0..model.n_states {
        for a in 0..na {
            let g = score_of(s, a);
            let g2 = dot(&g, &g);
            m_i = m_i.max(g2.sqrt());
            n_i = n_i.min(g2.sqrt());
            let w = mom.d[s] * mom.pi[s * na + a];
            let k = s * na + a;
            let (c, h) = (q[k] - noise.mu_q, qh[k] - noise.mu_qhat);
            e_c2 += w * (c * c + noise.sigma_q.powi(2)) * g2;
            e_q2 += w * (h * h + noise.sigma_qhat.powi(2)) * g2;
            e_sq += w * g2;
            for (x, gx) in mean_c.iter_mut().zip(&g) {
                *x += w * c * gx;
            }
            for (x, gx) in mean_q.iter_mut().zip(&g) {
                *x += w * h * gx;
            }
            lower_first += w * tail[k] * tail[k];
        }
    }
    let exact_tvar_c = e_c2 - dot(&mean_c, &mean_c);
    let exact_tvar_q = e_q2 - dot(&mean_q, &mean_q);
    let dsig = noise.sigma_q.powi(2) - noise.sigma_qhat.powi(2);
    let epsilon: Vec<(usize, f64)> = outside
        .iter()
        .map(|&j| {
            let mut eps = 0.0f64;
            for s in 0..model.n_states {
                let pj = policy.probs(j, model.obs[s][j]);
                for a in 0..na {
                    let mut marg = 0.0;
                    for (b, p) in pj.iter().enumerate() {
                        let mut alt = model.actions[a].clone();
                        alt[j] = b;
                        let kb = s * na + actions_index(model, &alt);
                        marg += p * q[kb];
                    }
                    eps = eps.max((q[s * na + a] - marg).abs());
                }
            }
            (j, eps)
        })
        .collect();
    let lower_bound = n_i * n_i * lower_first + dsig * e_sq;
    let upper_bound = m_i * m_i * epsilon.iter().map(|(_, e)| e * e).sum::<f64>() + dsig * e_sq;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_dist = WeightedIndex::new(&mom.d).map_err(|e| Error::Config(format!("occupancy: {e}")))?;
    let action_dists: Vec<Vec<WeightedIndex<f64>>> = (0..model.n_states)
        .map(|s| {
            (0..model.n_agents)
                .map(|k| WeightedIndex::new(policy.probs(k, model.obs[s][k])).expect("softmax row"))
                .collect()
        })
        .collect();
    let dq = Normal::new(noise.mu_q, noise.sigma_q).map_err(|e| Error::Config(e.to_string()))?;
    let dqh = Normal::new(noise.mu_qhat, noise.sigma_qhat).map_err(|e| Error::Config(e.to_string()))?;
    let radix: Vec<usize> = policy.n_actions.clone();
    let mut gc = Vec::with_capacity(n_samples * dim);
    let mut gq = Vec::with_capacity(n_samples * dim);
    for _ in 0..n_samples {
        let s = state_dist.sample(&mut rng);
        let acts: Vec<usize> = action_dists[s].iter().map(|d| d.sample(&mut rng)).collect();
        let a = crate::env::tabular::encode(&acts, &radix);
        let g = score_of(s, a);
        let (c, h) = (q[s * na + a] - dq.sample(&mut rng), qh[s * na + a] - dqh.sample(&mut rng));
        gc.extend(g.iter().map(|x| c * x));
        gq.extend(g.iter().map(|x| h * x));
    }
    let mean = |v: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for row in v.chunks(dim) {
            for (x, y) in m.iter_mut().zip(row) {
                *x += y;
            }
        }
        m.iter().map(|x| x / n_samples as f64).collect()
    };
    let (mc, mq) = (mean(&gc), mean(&gq));
    let centred = |row: &[f64], m: &[f64]| row.iter().zip(m).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let bessel = n_samples as f64 / (n_samples as f64 - 1.0);
    let diffs: Vec<f64> = gc
        .chunks(dim)
        .zip(gq.chunks(dim))
        .map(|(c, q)| bessel * (centred(c, &mc) - centred(q, &mq)))
        .collect();
    let tvar_c = bessel * gc.chunks(dim).map(|c| centred(c, &mc)).sum::<f64>() / n_samples as f64;
    let tvar_q = bessel * gq.chunks(dim).map(|c| centred(c, &mq)).sum::<f64>() / n_samples as f64;
    let difference = diffs.iter().sum::<f64>() / n_samples as f64;
    let var = diffs.iter().map(|x| (x - difference).powi(2)).sum::<f64>() / (n_samples as f64 - 1.0);
    let std_error = (var / n_samples as f64).sqrt();
    Ok(VarianceReport {
        agent: i,
        samples: n_samples,
        noise,
        tvar_c,
        tvar_q,
        difference,
        std_error,
        half_width: Z_TWO_SIDED_99 * std_error,
        lower_confidence: difference - Z_ONE_SIDED_99 * std_error,
        exact_difference: exact_tvar_c - exact_tvar_q,
        exact_tvar_c,
        exact_tvar_q,
        m_i,
        n_i,
        epsilon,
        mean_sq_score: e_sq,
        lower_bound,
        upper_bound,
    })
}

fn actions_index(model: &JointModel, acts: &[usize]) -> usize {
    let radix: Vec<usize> = (0..model.n_agents).map(|k| model.actions.iter().map(|a| a[k]).max().unwrap_or(0) + 1).collect();
    crate::env::tabular::encode(acts, &radix)
}

/// `J = Σ_s μ0(s) Σ_a π(a|s) Σ_j Q_j(s,a)` for discounted values.
pub fn objective(model: &JointModel, policy: &TabularPolicy, gamma: f64) -> Result<f64> {
    let q = q_tables(model, policy, gamma, Horizon::Discounted)?.global();
    let pi = model.joint_policy(policy);
    let na = model.n_actions;
    Ok((0..model.n_states).map(|s| model.mu0[s] * (0..na).map(|a| pi[s * na + a] * q[s * na + a]).sum::<f64>()).sum())
}

/// Central-difference `∇_{θ_i} J`.
pub fn fd_policy_gradient(model: &JointModel, policy: &TabularPolicy, gamma: f64, i: usize, h: f64) -> Result<Vec<f64>> {
    (0..policy.param_count(i))
        .map(|k| Ok((objective(model, &policy.perturbed(i, k, h), gamma)? - objective(model, &policy.perturbed(i, k, -h), gamma)?) / (2.0 * h)))
        .collect()
}

/// `(1/(1−γ)) Σ_s d(s) Σ_a π(a|s) Q̂_i(s,a) ∇ ln π_i` by enumeration.
pub fn exact_policy_gradient(model: &JointModel, policy: &TabularPolicy, oracle: &QOracle, i: usize, gd: &AgentSet) -> Result<Vec<f64>> {
    let pi = model.joint_policy(policy);
    let d = model.discounted_occupancy(&pi, oracle.gamma)?;
    let qh = oracle.sum_over(gd.iter().copied());
    let na = model.n_actions;
    let mut g = vec![0.0; policy.param_count(i)];
    for s in 0..model.n_states {
        for a in 0..na {
            let w = d[s] * pi[s * na + a] * qh[s * na + a] / (1.0 - oracle.gamma);
            for (x, sc) in g.iter_mut().zip(policy.score(i, model.obs[s][i], model.actions[a][i])) {
                *x += w * sc;
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PgEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub samples: usize,
}

/// Sample mean of `(1/(1−γ)) Q̂_i(s,a) ∇ ln π_i` with `s ∼ d`, `a ∼ π`.
pub fn stochastic_pg(model: &JointModel, policy: &TabularPolicy, oracle: &QOracle, i: usize, gd: &AgentSet, n_samples: usize, seed: u64) -> Result<PgEstimate> {
    if n_samples < 2 {
        return Err(Error::Config("need ≥ 2 samples".into()));
    }
    let pi = model.joint_policy(policy);
    let d = model.discounted_occupancy(&pi, oracle.gamma)?;
    let qh = oracle.sum_over(gd.iter().copied());
    let na = model.n_actions;
    let states = WeightedIndex::new(&d).map_err(|e| Error::Config(format!("occupancy: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = policy.param_count(i);
    let (mut sum, mut sum2) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..n_samples {
        let s = states.sample(&mut rng);
        let acts: Vec<usize> = (0..model.n_agents)
            .map(|k| WeightedIndex::new(policy.probs(k, model.obs[s][k])).expect("softmax row").sample(&mut rng))
            .collect();
        let a = crate::env::tabular::encode(&acts, &policy.n_actions);
        let w = qh[s * na + a] / (1.0 - oracle.gamma);
        for ((x, x2), sc) in sum.iter_mut().zip(sum2.iter_mut()).zip(policy.score(i, model.obs[s][i], acts[i])) {
            let v = w * sc;
            *x += v;
            *x2 += v * v;
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|x| x / n).collect();
    let std_error = sum2
        .iter()
        .zip(&mean)
        .map(|(x2, m)| ((x2 / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok(PgEstimate { mean, std_error, samples: n_samples })
}

/// Three agents: agents 1 and 2 share dynamics and rewards, agent 3 is
/// isolated and its reward is centred under its own policy (`E_{a_3}[r_3] = 0`),
/// so `Q_3 = r_3`. With `centred = false` a constant offset is added to `r_3`.
pub fn variance_lab_instance(seed: u64, centred: bool) -> Result<(TabularPoscg, TabularPolicy)> {
    let graphs = CouplingGraphs::new(3, vec![(1, 2), (2, 1)], vec![(2, 1)], vec![(1, 2), (2, 1)]);
    let base = TabularPoscg::random(graphs.clone(), vec![2; 3], vec![2; 3], 0, seed)?;
    let policy = TabularPolicy::random(&base, 1.0, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let mut reward = base.reward.clone();
    let mut r3 = vec![0.0; 4];
    for s3 in 0..2 {
        let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..=2.0)).collect();
        let p = policy.probs(2, s3);
        let mean: f64 = c.iter().zip(&p).map(|(c, p)| c * p).sum();
        for a3 in 0..2 {
            r3[s3 * 2 + a3] = c[a3] - if centred { mean } else { mean - 3.0 };
        }
    }
    reward[2] = r3;
    let game = TabularPoscg::new("variance-lab", graphs, base.n_states, base.n_actions, base.transition, reward, base.initial, 0)?;
    Ok((game, policy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn game(seed: u64) -> TabularPoscg {
        let g = CouplingGraphs::new(2, vec![(1, 2)], vec![(2, 1)], vec![]);
        TabularPoscg::random(g, vec![2, 2], vec![2, 2], 2, seed).unwrap()
    }

    #[test]
    fn policy_rows_normalize_and_scores_sum_to_zero() {
        let g = game(1);
        let p = TabularPolicy::random(&g, 2.0, 3);
        for i in 0..2 {
            for o in 0..g.obs_count(i) {
                assert!((p.probs(i, o).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let pr = p.probs(i, o);
                let mut expect = vec![0.0; p.param_count(i)];
                for a in 0..2 {
                    for (e, s) in expect.iter_mut().zip(p.score(i, o, a)) {
                        *e += pr[a] * s;
                    }
                }
                assert!(expect.iter().all(|x| x.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn horizon_zero_is_reward() {
        let g = game(2);
        let m = JointModel::new(&g).unwrap();
        let o = q_tables(&m, &TabularPolicy::random(&g, 1.0, 0), 0.9, Horizon::Finite(0)).unwrap();
        assert_eq!(o.q, m.r);
        let z = q_tables(&m, &TabularPolicy::random(&g, 1.0, 0), 0.0, Horizon::Finite(4)).unwrap();
        assert_eq!(z.q, m.r);
    }

    #[test]
    fn occupancy_is_a_distribution() {
        let g = game(3);
        let m = JointModel::new(&g).unwrap();
        let pi = m.joint_policy(&TabularPolicy::random(&g, 1.0, 1));
        let d = m.discounted_occupancy(&pi, 0.8).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.discounted_occupancy(&pi, 0.0).unwrap(), m.mu0);
    }
}
