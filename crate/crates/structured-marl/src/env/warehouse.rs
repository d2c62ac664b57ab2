//! Resource redistribution between warehouses on a directed state graph.
//!
//! Agent `i` holds `m_i` and ships fractions `b_ij` of it to its out-neighbours
//! whenever `m_i ≥ 0`. An exogenous supply-minus-demand term `z_i(t)` is added
//! each step and negative stock is penalized quadratically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvModel, EnvRng, GlobalState};
use crate::coupling::{derive_index_sets, AgentSet, CouplingGraphs, IndexSets};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarehouseParams {
    /// Initial stock per agent.
    pub m0: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub omega: Vec<f64>,
    pub phase: f64,
    /// Half-width of uniform noise added to `z_i`; zero disables it.
    pub noise_bound: f64,
    pub episode_length: usize,
    pub reward_bound: f64,
}

impl WarehouseParams {
    /// `m_i(0) = 1`, `z_i(t) = A_i sin(t)`.
    pub fn with_amplitudes(amplitude: Vec<f64>, episode_length: usize) -> Self {
        let n = amplitude.len();
        Self {
            m0: vec![1.0; n],
            amplitude,
            omega: vec![1.0; n],
            phase: 0.0,
            noise_bound: 0.0,
            episode_length,
            reward_bound: 1e4,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.m0.len() != n || self.amplitude.len() != n || self.omega.len() != n {
            return Err(Error::Config(format!("warehouse parameter vectors must have {n} entries")));
        }
        for i in 0..n {
            if self.amplitude[i].abs() > self.m0[i] {
                return Err(Error::Config(format!("|A_{}| exceeds m_{}(0)", i + 1, i + 1)));
            }
        }
        if self.noise_bound < 0.0 || self.episode_length == 0 {
            return Err(Error::Config("noise_bound ≥ 0 and episode_length ≥ 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Warehouse {
    name: String,
    graphs: CouplingGraphs,
    idx: IndexSets,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
    pub params: WarehouseParams,
}

/// Penalty on negative stock.
pub fn shortage_penalty(m: f64) -> f64 {
    if m >= 0.0 {
        0.0
    } else {
        -m * m
    }
}

impl Warehouse {
    pub fn new(name: &str, graphs: CouplingGraphs, params: WarehouseParams) -> Result<Self> {
        let idx = derive_index_sets(&graphs)?;
        params.validate(graphs.n_agents)?;
        let n = graphs.n_agents;
        let out = (0..n).map(|i| graphs.state_out_neighbors(i)).collect();
        let inn = (0..n).map(|i| graphs.state_in_neighbors(i)).collect();
        Ok(Self { name: name.to_string(), graphs, idx, out, inn, params })
    }

    pub fn index_sets(&self) -> &IndexSets {
        &self.idx
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    fn z(&self, i: usize, t: usize, rng: &mut EnvRng) -> f64 {
        let p = &self.params;
        let mut z = p.amplitude[i] * (p.omega[i] * t as f64 + p.phase).sin();
        if p.noise_bound > 0.0 {
            z += rng.gen_range(-p.noise_bound..=p.noise_bound);
        }
        z
    }

    fn check_action(&self, i: usize, a: &[f64]) -> Result<()> {
        let k = self.out[i].len() + 1;
        if a.len() != k {
            return Err(Error::InvalidAction(format!("agent {} expects {k} entries, got {}", i + 1, a.len())));
        }
        let tol = 1e-9;
        if a.iter().any(|&b| !(-tol..=1.0 + tol).contains(&b)) {
            return Err(Error::InvalidAction(format!("agent {} fraction outside [0,1]", i + 1)));
        }
        let shipped: f64 = a[..k - 1].iter().sum();
        if shipped > 1.0 + tol {
            return Err(Error::InvalidAction(format!("agent {} ships {shipped} > 1", i + 1)));
        }
        Ok(())
    }

    /// Reward of agent `i` at stock levels `m`.
    pub fn reward(&self, i: usize, m: &[f64]) -> f64 {
        reward_over(&self.idx.i_r[i], m)
    }
}

fn reward_over(set: &AgentSet, m: &[f64]) -> f64 {
    set.iter().map(|&j| shortage_penalty(m[j])).sum()
}

impl EnvModel for Warehouse {
    fn name(&self) -> &str {
        &self.name
    }

    fn graphs(&self) -> &CouplingGraphs {
        &self.graphs
    }

    fn state_dim(&self, _i: usize) -> usize {
        2
    }

    fn action_dim(&self, i: usize) -> usize {
        self.out[i].len() + 1
    }

    fn obs_dim(&self, i: usize) -> usize {
        self.idx.i_o[i].len() + 1
    }

    fn action_space(&self, _i: usize) -> ActionSpace {
        ActionSpace::Simplex
    }

    fn episode_length(&self) -> usize {
        self.params.episode_length
    }

    fn reward_bound(&self) -> f64 {
        self.params.reward_bound
    }

    fn reset(&self, rng: &mut EnvRng) -> GlobalState {
        let agents = (0..self.n_agents()).map(|i| vec![self.params.m0[i], self.z(i, 0, rng)]).collect();
        GlobalState { t: 0, agents }
    }

    fn observe(&self, s: &GlobalState) -> Vec<Vec<f64>> {
        (0..self.n_agents())
            .map(|i| {
                let mut o: Vec<f64> = self.idx.i_o[i].iter().map(|&j| s.agents[j][0]).collect();
                o.push(s.agents[i][1]);
                o
            })
            .collect()
    }

    fn step(&self, s: &GlobalState, a: &[Vec<f64>], rng: &mut EnvRng) -> Result<(GlobalState, Vec<f64>)> {
        let n = self.n_agents();
        if a.len() != n {
            return Err(Error::InvalidAction(format!("expected {n} actions, got {}", a.len())));
        }
        for (i, ai) in a.iter().enumerate() {
            self.check_action(i, ai)?;
        }
        let m: Vec<f64> = s.agents.iter().map(|x| x[0]).collect();
        let active = |j: usize| if m[j] >= 0.0 { 1.0 } else { 0.0 };
        let rewards = (0..n).map(|i| self.reward(i, &m)).collect();
        let t_next = s.t + 1;
        let mut agents = Vec::with_capacity(n);
        for i in 0..n {
            let sent: f64 = (0..self.out[i].len()).map(|k| a[i][k]).sum::<f64>() * active(i) * m[i];
            let received: f64 = self.inn[i]
                .iter()
                .map(|&j| {
                    let slot = self.out[j].binary_search(&i).expect("edge present");
                    active(j) * a[j][slot] * m[j]
                })
                .sum();
            let next_m = m[i] - sent + received + s.agents[i][1];
            agents.push(vec![next_m, self.z(i, t_next, rng)]);
        }
        Ok((GlobalState { t: t_next, agents }, rewards))
    }
}
