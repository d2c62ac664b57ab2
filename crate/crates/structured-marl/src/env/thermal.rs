//! Multi-zone building temperature control.
//!
//! Each zone is a first-order thermal capacitance exchanging heat with the
//! outdoors, with adjacent zones through shared walls, and with its actuator.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActionSpace, EnvModel, EnvRng, GlobalState};
use crate::coupling::{derive_index_sets, CouplingGraphs, IndexSets};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalParams {
    /// Step length in seconds.
    pub delta: f64,
    /// Thermal capacitance per zone (kJ/°C).
    pub nu: Vec<f64>,
    /// Wall-to-outdoor resistance per zone (°C/kW).
    pub zeta: Vec<f64>,
    /// Resistance of every shared wall (°C/kW).
    pub zeta_ij: f64,
    /// External heat per zone (kW).
    pub pi: Vec<f64>,
    /// Outdoor temperature (°C).
    pub eps0: f64,
    pub x_star: f64,
    pub beta: Vec<f64>,
    /// Variance of the process disturbance `w_i`; the additive term has std `√(Δ·w_var)/ν_i`.
    pub w_var: f64,
    pub u_max: f64,
    pub x0_mean: f64,
    pub x0_var: f64,
    pub episode_length: usize,
    pub reward_bound: f64,
}

impl ThermalParams {
    pub fn standard(n: usize, episode_length: usize) -> Self {
        Self {
            delta: 60.0,
            nu: vec![200.0; n],
            zeta: vec![1.0; n],
            zeta_ij: 1.0,
            pi: vec![1.0; n],
            eps0: 30.0,
            x_star: 22.0,
            beta: vec![0.01; n],
            w_var: 6.25,
            u_max: 15.0,
            x0_mean: 30.0,
            x0_var: 2.5,
            episode_length,
            reward_bound: 1e4,
        }
    }

    pub fn noise_std(&self, i: usize) -> f64 {
        (self.delta * self.w_var).sqrt() / self.nu[i]
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let lens = [self.nu.len(), self.zeta.len(), self.pi.len(), self.beta.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Config(format!("thermal parameter vectors must have {n} entries")));
        }
        if self.delta < 0.0 || self.nu.iter().any(|&v| v <= 0.0) || self.zeta.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("Δ ≥ 0, ν > 0 and ζ > 0 required".into()));
        }
        if self.zeta_ij <= 0.0 || self.w_var < 0.0 || self.x0_var < 0.0 || self.u_max <= 0.0 {
            return Err(Error::Config("ζ_ij > 0, variances ≥ 0 and u_max > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Thermal {
    name: String,
    graphs: CouplingGraphs,
    idx: IndexSets,
    neighbors: Vec<Vec<usize>>,
    pub params: ThermalParams,
}

impl Thermal {
    pub fn new(name: &str, graphs: CouplingGraphs, params: ThermalParams) -> Result<Self> {
        let idx = derive_index_sets(&graphs)?;
        params.validate(graphs.n_agents)?;
        let neighbors = (0..graphs.n_agents).map(|i| graphs.state_in_neighbors(i)).collect();
        Ok(Self { name: name.to_string(), graphs, idx, neighbors, params })
    }

    /// Noise-free successor temperature of zone `i`.
    pub fn drift(&self, x: &[f64], u: &[f64], i: usize) -> f64 {
        let p = &self.params;
        let (d, nu, zeta) = (p.delta, p.nu[i], p.zeta[i]);
        let walls: f64 = self.neighbors[i].iter().map(|&j| (x[j] - x[i]) * d / (nu * p.zeta_ij)).sum();
        (1.0 - d / (nu * zeta)) * x[i] + d / nu * u[i] + walls + d / (nu * zeta) * p.eps0 + d / nu * p.pi[i]
    }

    pub fn reward(&self, x: f64, u: f64, i: usize) -> f64 {
        let e = x - self.params.x_star;
        -e * e - self.params.beta[i] * u * u
    }
}

impl EnvModel for Thermal {
    fn name(&self) -> &str {
        &self.name
    }

    fn graphs(&self) -> &CouplingGraphs {
        &self.graphs
    }

    fn state_dim(&self, _i: usize) -> usize {
        1
    }

    fn action_dim(&self, _i: usize) -> usize {
        1
    }

    fn obs_dim(&self, i: usize) -> usize {
        self.idx.i_o[i].len()
    }

    fn action_space(&self, _i: usize) -> ActionSpace {
        ActionSpace::Box { u_max: self.params.u_max }
    }

    fn episode_length(&self) -> usize {
        self.params.episode_length
    }

    fn reward_bound(&self) -> f64 {
        self.params.reward_bound
    }

    fn reset(&self, rng: &mut EnvRng) -> GlobalState {
        let p = &self.params;
        let agents = (0..self.n_agents())
            .map(|_| {
                let x = if p.x0_var > 0.0 {
                    Normal::new(p.x0_mean, p.x0_var.sqrt()).expect("valid normal").sample(rng)
                } else {
                    p.x0_mean
                };
                vec![x]
            })
            .collect();
        GlobalState { t: 0, agents }
    }

    /// Temperatures of observed zones relative to the set point.
    fn observe(&self, s: &GlobalState) -> Vec<Vec<f64>> {
        (0..self.n_agents())
            .map(|i| self.idx.i_o[i].iter().map(|&j| s.agents[j][0] - self.params.x_star).collect())
            .collect()
    }

    fn state_features(&self, s: &GlobalState, i: usize) -> Vec<f64> {
        vec![s.agents[i][0] - self.params.x_star]
    }

    /// Inputs beyond `±u_max` are clamped to the actuator range.
    fn step(&self, s: &GlobalState, a: &[Vec<f64>], rng: &mut EnvRng) -> Result<(GlobalState, Vec<f64>)> {
        let n = self.n_agents();
        if a.len() != n || a.iter().any(|ai| ai.len() != 1) {
            return Err(Error::InvalidAction(format!("expected {n} scalar inputs")));
        }
        let um = self.params.u_max;
        let u: Vec<f64> = a.iter().map(|ai| ai[0].clamp(-um, um)).collect();
        let x: Vec<f64> = s.agents.iter().map(|v| v[0]).collect();
        let rewards = (0..n).map(|i| self.reward(x[i], u[i], i)).collect();
        let agents = (0..n)
            .map(|i| {
                let mut next = self.drift(&x, &u, i);
                let std = self.params.noise_std(i);
                if std > 0.0 {
                    let w: f64 = rand_distr::StandardNormal.sample(rng);
                    next += std * w;
                }
                vec![next]
            })
            .collect();
        Ok((GlobalState { t: s.t + 1, agents }, rewards))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn isolated() -> Thermal {
        let mut p = ThermalParams::standard(1, 40);
        p.w_var = 0.0;
        Thermal::new("zone", CouplingGraphs::decoupled(1), p).unwrap()
    }

    #[test]
    fn hand_evaluated_free_step() {
        let t = isolated();
        assert!((t.drift(&[30.0], &[0.0], 0) - 30.3).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_holds() {
        let t = isolated();
        let mut rng = EnvRng::seed_from_u64(1);
        let mut s = GlobalState { t: 0, agents: vec![vec![22.0]] };
        for _ in 0..50 {
            s = t.step(&s, &[vec![-9.0]], &mut rng).unwrap().0;
            assert!((s.agents[0][0] - 22.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_step_length_freezes_state() {
        let mut p = ThermalParams::standard(1, 40);
        p.delta = 0.0;
        let t = Thermal::new("zone", CouplingGraphs::decoupled(1), p).unwrap();
        let mut rng = EnvRng::seed_from_u64(1);
        let s = GlobalState { t: 0, agents: vec![vec![27.5]] };
        assert_eq!(t.step(&s, &[vec![3.0]], &mut rng).unwrap().0.agents[0][0], 27.5);
    }

    #[test]
    fn noise_std_matches_table() {
        let p = ThermalParams::standard(1, 40);
        assert!((p.noise_std(0) - (60.0f64 * 6.25).sqrt() / 200.0).abs() < 1e-15);
    }
}
