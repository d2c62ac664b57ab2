//! Partially observable cooperative games driven by coupling graphs.

pub mod tabular;
pub mod thermal;
pub mod warehouse;

use rand_chacha::ChaCha8Rng;

use crate::coupling::CouplingGraphs;
use crate::error::Result;

pub use tabular::{tabular_enumerate, TabularPoscg, DEFAULT_ENUMERATION_CAP};
pub use thermal::{Thermal, ThermalParams};
pub use warehouse::{Warehouse, WarehouseParams};

/// Generator used for every stochastic draw; portable and seedable.
pub type EnvRng = ChaCha8Rng;

/// Name of [`EnvRng`] as recorded in run metadata.
pub const RNG_NAME: &str = "ChaCha8 (rand_chacha 0.3)";

/// Per-agent state vectors plus the step counter within the episode.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub t: usize,
    pub agents: Vec<Vec<f64>>,
}

/// How an agent's action vector is constrained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSpace {
    /// Nonnegative entries summing to one.
    Simplex,
    /// Each entry in `[-u_max, u_max]`.
    Box { u_max: f64 },
}

pub trait EnvModel: Send + Sync {
    fn name(&self) -> &str;
    fn graphs(&self) -> &CouplingGraphs;
    fn n_agents(&self) -> usize {
        self.graphs().n_agents
    }
    /// Width of the per-agent state features fed to critics.
    fn state_dim(&self, i: usize) -> usize;
    fn action_dim(&self, i: usize) -> usize;
    fn obs_dim(&self, i: usize) -> usize;
    fn action_space(&self, i: usize) -> ActionSpace;
    fn episode_length(&self) -> usize;
    /// Bound on `|r_i|` expected within an episode.
    fn reward_bound(&self) -> f64;
    fn reset(&self, rng: &mut EnvRng) -> GlobalState;
    /// `o_i` depends on the states of `I_O^i` only.
    fn observe(&self, s: &GlobalState) -> Vec<Vec<f64>>;
    /// Critic features of agent `i`'s own state.
    fn state_features(&self, s: &GlobalState, i: usize) -> Vec<f64> {
        s.agents[i].clone()
    }
    /// Next state and per-agent rewards for `(s, a)`.
    fn step(&self, s: &GlobalState, a: &[Vec<f64>], rng: &mut EnvRng) -> Result<(GlobalState, Vec<f64>)>;
}
