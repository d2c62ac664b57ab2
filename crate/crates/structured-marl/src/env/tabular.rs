//! Small finite games whose transition and reward tables respect the coupling
//! graphs. Used by the brute-force oracles.
//!
//! Local configurations of a set of agents are encoded in mixed radix with the
//! lowest agent id as the most significant digit. The table of agent `i` for
//! the dynamics is indexed by (states of `I_S^i`, actions of `I_S^i`) and holds
//! a distribution over `s_i'`; the reward table is indexed by (states of
//! `I_R^i`, actions of `I_R^i`).

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};

use super::{ActionSpace, EnvModel, EnvRng, GlobalState};
use crate::coupling::{derive_index_sets, AgentSet, CouplingGraphs, IndexSets};
use crate::error::{Error, Result};

/// Largest number of `(state, action)` pairs [`tabular_enumerate`] accepts by default.
pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

#[derive(Clone, Debug)]
pub struct TabularPoscg {
    name: String,
    graphs: CouplingGraphs,
    idx: IndexSets,
    pub n_states: Vec<usize>,
    pub n_actions: Vec<usize>,
    /// `transition[i][row]` is a distribution over `s_i'`.
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    /// Independent initial distribution of each agent's state.
    pub initial: Vec<Vec<f64>>,
    pub horizon: usize,
}

/// Mixed-radix index of the entries of `values` selected by `set`.
pub fn local_index(set: &AgentSet, values: &[usize], radix: &[usize]) -> usize {
    set.iter().fold(0, |acc, &j| acc * radix[j] + values[j])
}

fn local_size(set: &AgentSet, radix: &[usize]) -> usize {
    set.iter().map(|&j| radix[j]).product()
}

fn random_distribution(rng: &mut EnvRng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

impl TabularPoscg {
    /// Checks shapes and that every distribution sums to one within `1e-12`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        graphs: CouplingGraphs,
        n_states: Vec<usize>,
        n_actions: Vec<usize>,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        initial: Vec<Vec<f64>>,
        horizon: usize,
    ) -> Result<Self> {
        let idx = derive_index_sets(&graphs)?;
        let n = graphs.n_agents;
        let lens_ok = [n_states.len(), n_actions.len(), transition.len(), reward.len(), initial.len()]
            .iter()
            .all(|&l| l == n);
        if !lens_ok || n_states.iter().chain(&n_actions).any(|&k| k == 0) {
            return Err(Error::ShapeMismatch(format!("tabular game needs {n} nonempty alphabets and tables")));
        }
        let game = Self { name: name.to_string(), graphs, idx, n_states, n_actions, transition, reward, initial, horizon };
        game.check_tables()?;
        Ok(game)
    }

    fn check_tables(&self) -> Result<()> {
        let is_dist = |d: &[f64], k: usize| {
            d.len() == k && d.iter().all(|&p| p >= 0.0) && (d.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        for i in 0..self.n_agents() {
            let rows = self.transition_rows(i);
            if self.transition[i].len() != rows {
                return Err(Error::ShapeMismatch(format!("agent {} needs {rows} transition rows", i + 1)));
            }
            if !self.transition[i].iter().all(|d| is_dist(d, self.n_states[i])) {
                return Err(Error::ShapeMismatch(format!("agent {} has a transition row that is not a distribution", i + 1)));
            }
            let entries = self.reward_entries(i);
            if self.reward[i].len() != entries || self.reward[i].iter().any(|r| !r.is_finite()) {
                return Err(Error::ShapeMismatch(format!("agent {} needs {entries} finite rewards", i + 1)));
            }
            if !is_dist(&self.initial[i], self.n_states[i]) {
                return Err(Error::ShapeMismatch(format!("agent {} initial distribution invalid", i + 1)));
            }
        }
        Ok(())
    }

    /// Random tables with the given alphabets; rewards uniform in `[-1, 1]`,
    /// uniform initial distribution.
    pub fn random(graphs: CouplingGraphs, n_states: Vec<usize>, n_actions: Vec<usize>, horizon: usize, seed: u64) -> Result<Self> {
        let idx = derive_index_sets(&graphs)?;
        let n = graphs.n_agents;
        if n_states.len() != n || n_actions.len() != n {
            return Err(Error::ShapeMismatch(format!("need {n} alphabet sizes")));
        }
        let mut rng = EnvRng::seed_from_u64(seed);
        let mut transition = Vec::with_capacity(n);
        let mut reward = Vec::with_capacity(n);
        for i in 0..n {
            let rows = local_size(&idx.i_s[i], &n_states) * local_size(&idx.i_s[i], &n_actions);
            transition.push((0..rows).map(|_| random_distribution(&mut rng, n_states[i])).collect());
            let entries = local_size(&idx.i_r[i], &n_states) * local_size(&idx.i_r[i], &n_actions);
            reward.push((0..entries).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        }
        let initial = n_states.iter().map(|&k| vec![1.0 / k as f64; k]).collect();
        Self::new("tabular", graphs, n_states, n_actions, transition, reward, initial, horizon)
    }

    pub fn index_sets(&self) -> &IndexSets {
        &self.idx
    }

    fn transition_rows(&self, i: usize) -> usize {
        local_size(&self.idx.i_s[i], &self.n_states) * local_size(&self.idx.i_s[i], &self.n_actions)
    }

    fn reward_entries(&self, i: usize) -> usize {
        local_size(&self.idx.i_r[i], &self.n_states) * local_size(&self.idx.i_r[i], &self.n_actions)
    }

    /// Distribution of `s_i'` given joint discrete `(s, a)`.
    pub fn transition_row(&self, i: usize, s: &[usize], a: &[usize]) -> &[f64] {
        let set = &self.idx.i_s[i];
        let row = local_index(set, s, &self.n_states) * local_size(set, &self.n_actions) + local_index(set, a, &self.n_actions);
        &self.transition[i][row]
    }

    pub fn reward_of(&self, i: usize, s: &[usize], a: &[usize]) -> f64 {
        let set = &self.idx.i_r[i];
        self.reward[i][local_index(set, s, &self.n_states) * local_size(set, &self.n_actions) + local_index(set, a, &self.n_actions)]
    }

    /// `P(s' | s, a)` as the product of the per-agent factors.
    pub fn joint_transition(&self, s: &[usize], a: &[usize], next: &[usize]) -> f64 {
        (0..self.n_agents()).map(|i| self.transition_row(i, s, a)[next[i]]).product()
    }

    pub fn initial_probability(&self, s: &[usize]) -> f64 {
        s.iter().enumerate().map(|(i, &x)| self.initial[i][x]).product()
    }

    pub fn joint_state_count(&self) -> usize {
        self.n_states.iter().product()
    }

    pub fn joint_action_count(&self) -> usize {
        self.n_actions.iter().product()
    }

    /// Number of distinct observations of agent `i`.
    pub fn obs_count(&self, i: usize) -> usize {
        local_size(&self.idx.i_o[i], &self.n_states)
    }

    /// Observation of agent `i` as a mixed-radix index over the states of `I_O^i`.
    pub fn obs_index(&self, i: usize, s: &[usize]) -> usize {
        local_index(&self.idx.i_o[i], s, &self.n_states)
    }

    pub fn decode_state(&self, k: usize) -> Vec<usize> {
        decode(k, &self.n_states)
    }

    pub fn encode_state(&self, s: &[usize]) -> usize {
        encode(s, &self.n_states)
    }

    pub fn decode_action(&self, k: usize) -> Vec<usize> {
        decode(k, &self.n_actions)
    }

    pub fn encode_action(&self, a: &[usize]) -> usize {
        encode(a, &self.n_actions)
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Mixed-radix encoding with entry 0 most significant.
pub fn encode(values: &[usize], radix: &[usize]) -> usize {
    values.iter().zip(radix).fold(0, |acc, (&v, &r)| acc * r + v)
}

pub fn decode(mut k: usize, radix: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radix.len()];
    for (slot, &r) in out.iter_mut().zip(radix).rev() {
        *slot = k % r;
        k /= r;
    }
    out
}

/// Every `(joint state, joint action)` pair in lexicographic order.
pub struct Enumeration {
    states: Vec<usize>,
    actions: Vec<usize>,
    next: usize,
    total: usize,
}

impl Iterator for Enumeration {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let n_a: usize = self.actions.iter().product();
        let k = self.next;
        self.next += 1;
        Some((decode(k / n_a, &self.states), decode(k % n_a, &self.actions)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Enumeration {}

/// Enumerates the joint state-action space, refusing spaces larger than `cap`.
pub fn tabular_enumerate(game: &TabularPoscg, cap: u128) -> Result<Enumeration> {
    let size = game.n_states.iter().chain(&game.n_actions).fold(1u128, |acc, &k| acc.saturating_mul(k as u128));
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    Ok(Enumeration { states: game.n_states.clone(), actions: game.n_actions.clone(), next: 0, total: size as usize })
}

impl EnvModel for TabularPoscg {
    fn name(&self) -> &str {
        &self.name
    }

    fn graphs(&self) -> &CouplingGraphs {
        &self.graphs
    }

    fn state_dim(&self, _i: usize) -> usize {
        1
    }

    fn action_dim(&self, i: usize) -> usize {
        self.n_actions[i]
    }

    fn obs_dim(&self, i: usize) -> usize {
        self.idx.i_o[i].len()
    }

    fn action_space(&self, _i: usize) -> ActionSpace {
        ActionSpace::Simplex
    }

    fn episode_length(&self) -> usize {
        self.horizon + 1
    }

    fn reward_bound(&self) -> f64 {
        self.max_abs_reward()
    }

    fn reset(&self, rng: &mut EnvRng) -> GlobalState {
        let agents = self
            .initial
            .iter()
            .map(|d| vec![WeightedIndex::new(d).expect("validated distribution").sample(rng) as f64])
            .collect();
        GlobalState { t: 0, agents }
    }

    /// States of `I_O^i` as numbers, ascending by agent.
    fn observe(&self, s: &GlobalState) -> Vec<Vec<f64>> {
        (0..self.n_agents()).map(|i| self.idx.i_o[i].iter().map(|&j| s.agents[j][0]).collect()).collect()
    }

    /// Each action vector is a distribution over the agent's alphabet from
    /// which the discrete action is drawn.
    fn step(&self, s: &GlobalState, a: &[Vec<f64>], rng: &mut EnvRng) -> Result<(GlobalState, Vec<f64>)> {
        let n = self.n_agents();
        if a.len() != n {
            return Err(Error::InvalidAction(format!("expected {n} actions, got {}", a.len())));
        }
        let states: Vec<usize> = s.agents.iter().map(|v| v[0] as usize).collect();
        let mut actions = Vec::with_capacity(n);
        for (i, ai) in a.iter().enumerate() {
            if ai.len() != self.n_actions[i] {
                return Err(Error::InvalidAction(format!("agent {} expects {} probabilities", i + 1, self.n_actions[i])));
            }
            let pick = WeightedIndex::new(ai)
                .map_err(|e| Error::InvalidAction(format!("agent {}: {e}", i + 1)))?
                .sample(rng);
            actions.push(pick);
        }
        let rewards = (0..n).map(|i| self.reward_of(i, &states, &actions)).collect();
        let agents = (0..n)
            .map(|i| {
                let row = self.transition_row(i, &states, &actions);
                vec![WeightedIndex::new(row).expect("validated distribution").sample(rng) as f64]
            })
            .collect();
        Ok((GlobalState { t: s.t + 1, agents }, rewards))
    }
}
