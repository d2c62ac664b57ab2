//! Structured off-policy actor-critic training with per-agent critics over
//! value dependency sets and actor updates over gradient dependency sets.
//!
//! Each agent owns a deterministic actor on its observation and a critic on
//! the states and actions of `I_Q^i`. The actor of agent `i` follows the sum of
//! the action gradients of the critics in `I_GD^i`. All agents update
//! simultaneously from the parameters held at the start of the epoch.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coupling::{derive_index_sets, AgentSet, CouplingGraphs};
use crate::dependency::DependencySets;
use crate::env::{ActionSpace, EnvModel, EnvRng, GlobalState};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Head, Mlp, OptimState, Params, Real, Want};

/// Which dependency sets drive the critics and actor updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Exact,
    Kappa(usize),
    /// Every critic sees all agents; gradient sets stay exact.
    UndecomposedQ,
    /// One critic per agent over all agents, trained on the summed rewards of `I_GD^i`.
    UndecomposedQhat,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Exact => write!(f, "exact"),
            Variant::Kappa(k) => write!(f, "kappa:{k}"),
            Variant::UndecomposedQ => write!(f, "undecq"),
            Variant::UndecomposedQhat => write!(f, "undecqhat"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Variant::Exact),
            "undecq" => Ok(Variant::UndecomposedQ),
            "undecqhat" => Ok(Variant::UndecomposedQhat),
            _ => s
                .strip_prefix("kappa:")
                .and_then(|k| k.parse().ok())
                .map(Variant::Kappa)
                .ok_or_else(|| Error::UnknownVariant(s.to_string())),
        }
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// Where the discount enters the critic objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountPlacement {
    /// `y = r + γQ'`, loss `(y − Q)²`.
    #[default]
    Standard,
    /// `y = r + Q'`, loss `(y − γQ)²`.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Gaussian exploration noise with linearly annealed standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Fraction of the epochs over which σ moves from start to end.
    pub decay_fraction: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { sigma_start: 0.3, sigma_end: 0.05, decay_fraction: 0.5 }
    }
}

impl NoiseSchedule {
    pub fn sigma(&self, epoch: usize, epochs: usize) -> f64 {
        let span = self.decay_fraction * epochs as f64;
        if span <= 0.0 {
            return self.sigma_end;
        }
        let frac = epoch as f64 / span;
        if frac >= 1.0 {
            return self.sigma_end;
        }
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub episode_length: usize,
    pub update_interval: usize,
    pub warmup: usize,
    pub noise: NoiseSchedule,
    pub variant: Variant,
    pub seed: u64,
    pub replay_capacity: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    #[serde(default)]
    pub discount: DiscountPlacement,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Defaults shared by the builtin configurations.
    pub fn base(epochs: usize, episode_length: usize, gamma: f64, actor_lr: f64, critic_lr: f64) -> Self {
        Self {
            epochs,
            batch_size: 256,
            tau: 0.01,
            gamma,
            actor_lr,
            critic_lr,
            episode_length,
            update_interval: 1,
            warmup: 256,
            noise: NoiseSchedule::default(),
            variant: Variant::Exact,
            seed: 0,
            replay_capacity: 1_000_000,
            actor_hidden: vec![64, 64, 64],
            critic_hidden: vec![64, 64, 64],
            discount: DiscountPlacement::Standard,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.update_interval == 0 || self.episode_length == 0 {
            return Err(Error::Config("batch_size, update_interval and episode_length must be ≥ 1".into()));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::Config("replay_capacity must hold at least one batch".into()));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Dependency sets used by one variant, 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSets {
    /// Agents whose states and actions feed critic `i`.
    pub i_q: Vec<AgentSet>,
    /// Agents whose critics depend on agent `i`'s policy.
    pub i_gd: Vec<AgentSet>,
    /// Critics whose action gradients drive actor `i`.
    pub actor_peers: Vec<AgentSet>,
    /// Agents whose rewards are summed into critic `i`'s target.
    pub reward_sets: Vec<AgentSet>,
}

pub fn variant_dependency(variant: Variant, graphs: &CouplingGraphs) -> Result<VariantSets> {
    let idx = derive_index_sets(graphs)?;
    let n = graphs.n_agents;
    let all: AgentSet = (0..n).collect();
    let single = |i: usize| AgentSet::from([i]);
    let sets = match variant {
        Variant::Exact | Variant::Kappa(_) => {
            let d = match variant {
                Variant::Kappa(k) => DependencySets::kappa(&idx, k),
                _ => DependencySets::exact(&idx),
            };
            VariantSets {
                actor_peers: d.i_gd.clone(),
                i_q: d.i_q,
                i_gd: d.i_gd,
                reward_sets: (0..n).map(single).collect(),
            }
        }
        Variant::UndecomposedQ => {
            let d = DependencySets::exact(&idx);
            VariantSets {
                i_q: vec![all; n],
                actor_peers: d.i_gd.clone(),
                i_gd: d.i_gd,
                reward_sets: (0..n).map(single).collect(),
            }
        }
        Variant::UndecomposedQhat => {
            let d = DependencySets::exact(&idx);
            VariantSets {
                i_q: vec![all; n],
                reward_sets: d.i_gd.clone(),
                i_gd: d.i_gd,
                actor_peers: (0..n).map(single).collect(),
            }
        }
    };
    for i in 0..n {
        if let Some(&j) = sets.actor_peers[i].iter().find(|&&j| !sets.i_q[j].contains(&i)) {
            return Err(Error::Config(format!("critic of agent {} cannot see agent {}", j + 1, i + 1)));
        }
    }
    Ok(sets)
}

/// Clip-and-renormalize onto the simplex, or clip into the box.
/// A simplex vector that clips to zero falls back to `fallback`.
pub fn project_action(raw: &[f64], fallback: &[f64], space: ActionSpace) -> Vec<f64> {
    match space {
        ActionSpace::Simplex => {
            let clipped: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();
            let total: f64 = clipped.iter().sum();
            if total > 0.0 && total.is_finite() {
                clipped.into_iter().map(|x| x / total).collect()
            } else {
                fallback.to_vec()
            }
        }
        ActionSpace::Box { u_max } => raw.iter().map(|&x| x.clamp(-u_max, u_max)).collect(),
    }
}

/// `project(π(o) + ε)` with `ε ~ N(0, σ²I)`.
pub fn act_explore<T: Real>(actor: &Mlp<T>, obs: &[f64], sigma: f64, space: ActionSpace, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let input: Vec<T> = obs.iter().map(|&x| T::lit(x)).collect();
    let mean: Vec<f64> = actor.forward(&input)?.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    if sigma == 0.0 {
        return Ok(mean);
    }
    let noisy: Vec<f64> = mean
        .iter()
        .map(|&m| {
            let e: f64 = StandardNormal.sample(rng);
            m + sigma * e
        })
        .collect();
    Ok(project_action(&noisy, &mean, space))
}

/// Column widths of the flattened per-agent quantities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub state: Vec<usize>,
    pub obs: Vec<usize>,
    pub action: Vec<usize>,
}

impl Layout {
    pub fn of(env: &dyn EnvModel) -> Self {
        let n = env.n_agents();
        Self {
            state: (0..n).map(|i| env.state_dim(i)).collect(),
            obs: (0..n).map(|i| env.obs_dim(i)).collect(),
            action: (0..n).map(|i| env.action_dim(i)).collect(),
        }
    }

    fn offsets(widths: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(widths.len() + 1);
        let mut acc = 0;
        out.push(0);
        for w in widths {
            acc += w;
            out.push(acc);
        }
        out
    }
}

/// Ring buffer of global transitions; per-agent views are cut at sample time.
#[derive(Clone, Debug)]
pub struct SharedReplay<T> {
    capacity: usize,
    len: usize,
    cursor: usize,
    state_off: Vec<usize>,
    obs_off: Vec<usize>,
    action_off: Vec<usize>,
    n_agents: usize,
    state: Vec<T>,
    obs: Vec<T>,
    action: Vec<T>,
    reward: Vec<T>,
    next_state: Vec<T>,
    next_obs: Vec<T>,
}

/// One global transition with per-agent blocks.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: Vec<Vec<f64>>,
    pub obs: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub next_state: Vec<Vec<f64>>,
    pub next_obs: Vec<Vec<f64>>,
}

impl<T: Real> SharedReplay<T> {
    pub fn new(layout: &Layout, capacity: usize) -> Self {
        Self {
            capacity,
            len: 0,
            cursor: 0,
            state_off: Layout::offsets(&layout.state),
            obs_off: Layout::offsets(&layout.obs),
            action_off: Layout::offsets(&layout.action),
            n_agents: layout.state.len(),
            state: Vec::new(),
            obs: Vec::new(),
            action: Vec::new(),
            reward: Vec::new(),
            next_state: Vec::new(),
            next_obs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn write(buf: &mut Vec<T>, width: usize, slot: usize, blocks: &[Vec<f64>]) {
        let flat = blocks.iter().flatten().map(|&x| T::lit(x));
        if slot * width == buf.len() {
            buf.extend(flat);
        } else {
            for (dst, v) in buf[slot * width..(slot + 1) * width].iter_mut().zip(flat) {
                *dst = v;
            }
        }
    }

    pub fn push(&mut self, tr: &Transition) {
        let slot = self.cursor;
        let (sw, ow, aw) = (*self.state_off.last().unwrap(), *self.obs_off.last().unwrap(), *self.action_off.last().unwrap());
        Self::write(&mut self.state, sw, slot, &tr.state);
        Self::write(&mut self.obs, ow, slot, &tr.obs);
        Self::write(&mut self.action, aw, slot, &tr.action);
        Self::write(&mut self.reward, self.n_agents, slot, std::slice::from_ref(&tr.reward));
        Self::write(&mut self.next_state, sw, slot, &tr.next_state);
        Self::write(&mut self.next_obs, ow, slot, &tr.next_obs);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// `m` distinct row indices drawn uniformly.
    pub fn sample_rows(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.len < m {
            return Err(Error::InsufficientData { have: self.len, need: m });
        }
        Ok(sample(rng, self.len, m).into_vec())
    }

    /// Per-agent blocks of the given rows.
    pub fn gather(&self, rows: &[usize]) -> Batch<T> {
        let n = self.n_agents;
        let cut = |buf: &[T], off: &[usize], j: usize| -> Vec<T> {
            let width = off[n];
            let mut out = Vec::with_capacity(rows.len() * (off[j + 1] - off[j]));
            for &r in rows {
                out.extend_from_slice(&buf[r * width + off[j]..r * width + off[j + 1]]);
            }
            out
        };
        Batch {
            size: rows.len(),
            state: (0..n).map(|j| cut(&self.state, &self.state_off, j)).collect(),
            obs: (0..n).map(|j| cut(&self.obs, &self.obs_off, j)).collect(),
            action: (0..n).map(|j| cut(&self.action, &self.action_off, j)).collect(),
            reward: (0..n).map(|j| rows.iter().map(|&r| self.reward[r * n + j]).collect()).collect(),
            next_state: (0..n).map(|j| cut(&self.next_state, &self.state_off, j)).collect(),
            next_obs: (0..n).map(|j| cut(&self.next_obs, &self.obs_off, j)).collect(),
        }
    }
}

/// Minibatch stored as per-agent `size × width` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub size: usize,
    pub state: Vec<Vec<T>>,
    pub obs: Vec<Vec<T>>,
    pub action: Vec<Vec<T>>,
    pub reward: Vec<Vec<T>>,
    pub next_state: Vec<Vec<T>>,
    pub next_obs: Vec<Vec<T>>,
}

/// Row-wise concatenation of the member blocks of `states` then of `actions`.
pub fn critic_input<T: Real>(members: &[usize], size: usize, states: &[Vec<T>], actions: &[&[T]]) -> Vec<T> {
    let width: usize = members.iter().map(|&j| (states[j].len() + actions[j].len()) / size.max(1)).sum();
    let mut out = Vec::with_capacity(size * width);
    for m in 0..size {
        for &j in members {
            let w = states[j].len() / size;
            out.extend_from_slice(&states[j][m * w..(m + 1) * w]);
        }
        for &j in members {
            let w = actions[j].len() / size;
            out.extend_from_slice(&actions[j][m * w..(m + 1) * w]);
        }
    }
    out
}

/// Networks, optimizers and dependency sets of one agent.
#[derive(Clone, Debug)]
pub struct AgentLearner<T> {
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    pub target_actor: Mlp<T>,
    pub target_critic: Mlp<T>,
    pub actor_opt: OptimState<T>,
    pub critic_opt: OptimState<T>,
    /// Critic members in ascending order.
    pub members: Vec<usize>,
    pub actor_peers: Vec<usize>,
    pub reward_set: Vec<usize>,
    /// First input column of each member's action block, parallel to `members`.
    action_cols: Vec<usize>,
}

impl<T: Real> AgentLearner<T> {
    /// Input columns of agent `k`'s action block in this critic.
    pub fn action_columns(&self, k: usize, layout: &Layout) -> Option<std::ops::Range<usize>> {
        let pos = self.members.binary_search(&k).ok()?;
        let start = self.action_cols[pos];
        Some(start..start + layout.action[k])
    }
}

/// Actors sharing one stacked critic evaluation; larger stacks measured slower.
const STACK_ACTORS: usize = 1;

/// Critic input on stored transitions with its first-layer pre-activation.
#[derive(Clone, Debug)]
pub struct CriticBase<T> {
    pub x: Vec<T>,
    pub z1: Vec<T>,
}

/// Gradients of one simultaneous update.
#[derive(Clone, Debug)]
pub struct StepGrads<T> {
    pub critic: Vec<Params<T>>,
    pub actor: Vec<Params<T>>,
    pub critic_loss: Vec<f64>,
}

/// Per-epoch training metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub episode_length: usize,
    /// `Σ_i r_i` of each epoch's step.
    pub step_return: Vec<f64>,
    /// Mean of `Σ_i r_i` over the steps of the episode containing each epoch.
    pub episode_return: Vec<f64>,
    /// Trailing mean of `episode_return` over the last [`SMOOTHING_EPISODES`] episodes.
    pub smoothed_return: Vec<f64>,
    pub max_abs_reward: f64,
    pub updates: usize,
}

/// Number of episodes in the trailing window of `smoothed_return`.
pub const SMOOTHING_EPISODES: usize = 10;

impl RunRecord {
    pub fn from_steps(variant: Variant, seed: u64, episode_length: usize, step_return: Vec<f64>, max_abs_reward: f64, updates: usize) -> Self {
        let k = step_return.len();
        let mut episode_return = Vec::with_capacity(k);
        for chunk in step_return.chunks(episode_length) {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            episode_return.extend(std::iter::repeat_n(mean, chunk.len()));
        }
        let window = SMOOTHING_EPISODES * episode_length;
        let mut smoothed_return = Vec::with_capacity(k);
        let mut acc = 0.0;
        for e in 0..k {
            acc += episode_return[e];
            if e >= window {
                acc -= episode_return[e - window];
            }
            smoothed_return.push(acc / (e + 1).min(window) as f64);
        }
        Self { variant, seed, episode_length, step_return, episode_return, smoothed_return, max_abs_reward, updates }
    }

    /// Mean episode return over the last `⌈0.2·K⌉` epochs.
    pub fn final_fraction_mean(&self, fraction: f64) -> Option<f64> {
        let k = self.episode_return.len();
        let take = (fraction * k as f64).ceil() as usize;
        if take == 0 {
            return None;
        }
        let tail = &self.episode_return[k - take..];
        Some(tail.iter().sum::<f64>() / take as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.step_return.iter().chain(&self.episode_return).chain(&self.smoothed_return).all(|x| x.is_finite())
    }
}

/// Named network parameters of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoints {
    pub agent: usize,
    pub actor: Checkpoint,
    pub critic: Checkpoint,
    pub target_actor: Checkpoint,
    pub target_critic: Checkpoint,
}

fn seed_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SAMPLE: u64 = 4;

pub struct Trainer<'a, T> {
    env: &'a dyn EnvModel,
    pub config: TrainConfig,
    pub sets: VariantSets,
    pub layout: Layout,
    pub learners: Vec<AgentLearner<T>>,
    pub replay: SharedReplay<T>,
    env_rng: EnvRng,
    noise_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    state: Option<GlobalState>,
    epoch: usize,
    step_return: Vec<f64>,
    max_abs_reward: f64,
    updates: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(env: &'a dyn EnvModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sets = variant_dependency(config.variant, env.graphs())?;
        let layout = Layout::of(env);
        let n = env.n_agents();
        let mut init = seed_for(config.seed, STREAM_INIT);
        let mut learners = Vec::with_capacity(n);
        for i in 0..n {
            let (head, u_max) = match env.action_space(i) {
                ActionSpace::Simplex => (Head::Softmax, 1.0),
                ActionSpace::Box { u_max } => (Head::Tanh, u_max),
            };
            let mut actor_sizes = vec![layout.obs[i]];
            actor_sizes.extend(&config.actor_hidden);
            actor_sizes.push(layout.action[i]);
            let members: Vec<usize> = sets.i_q[i].iter().copied().collect();
            let state_width: usize = members.iter().map(|&j| layout.state[j]).sum();
            let mut action_cols = Vec::with_capacity(members.len());
            let mut col = state_width;
            for &j in &members {
                action_cols.push(col);
                col += layout.action[j];
            }
            let mut critic_sizes = vec![col];
            critic_sizes.extend(&config.critic_hidden);
            critic_sizes.push(1);
            let actor_seed = rand::Rng::gen::<u64>(&mut init);
            let critic_seed = rand::Rng::gen::<u64>(&mut init);
            let actor = Mlp::init_glorot(&actor_sizes, head, T::lit(u_max), actor_seed);
            let critic = Mlp::init_glorot(&critic_sizes, Head::Linear, T::one(), critic_seed);
            learners.push(AgentLearner {
                actor_opt: OptimState::adam(&actor, T::lit(config.actor_lr)),
                critic_opt: OptimState::adam(&critic, T::lit(config.critic_lr)),
                target_actor: actor.clone(),
                target_critic: critic.clone(),
                actor,
                critic,
                members,
                actor_peers: sets.actor_peers[i].iter().copied().collect(),
                reward_set: sets.reward_sets[i].iter().copied().collect(),
                action_cols,
            });
        }
        let replay = SharedReplay::new(&layout, config.replay_capacity);
        Ok(Self {
            env,
            env_rng: seed_for(config.seed, STREAM_ENV),
            noise_rng: seed_for(config.seed, STREAM_NOISE),
            sample_rng: seed_for(config.seed, STREAM_SAMPLE),
            config,
            sets,
            layout,
            learners,
            replay,
            state: None,
            epoch: 0,
            step_return: Vec::new(),
            max_abs_reward: 0.0,
            updates: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One environment step followed, when due, by a simultaneous update.
    pub fn run_epoch(&mut self) -> Result<()> {
        let env = self.env;
        let n = env.n_agents();
        if self.epoch.is_multiple_of(self.config.episode_length) || self.state.is_none() {
            self.state = Some(env.reset(&mut self.env_rng));
        }
        let s = self.state.take().expect("state present");
        let obs = env.observe(&s);
        let sigma = self.config.noise.sigma(self.epoch, self.config.epochs);
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            let a = act_explore(&self.learners[i].actor, &obs[i], sigma, env.action_space(i), &mut self.noise_rng)?;
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("actor {} produced a non-finite action at epoch {}", i + 1, self.epoch)));
            }
            actions.push(a);
        }
        let (next, rewards) = env.step(&s, &actions, &mut self.env_rng)?;
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite reward at epoch {}", self.epoch)));
        }
        self.max_abs_reward = rewards.iter().fold(self.max_abs_reward, |m, r| m.max(r.abs()));
        self.step_return.push(rewards.iter().sum());
        let features = |g: &GlobalState| (0..n).map(|i| env.state_features(g, i)).collect::<Vec<_>>();
        self.replay.push(&Transition {
            state: features(&s),
            obs,
            action: actions,
            reward: rewards,
            next_state: features(&next),
            next_obs: env.observe(&next),
        });
        self.state = Some(next);
        let ready = self.replay.len() >= self.config.batch_size.max(self.config.warmup);
        if ready && self.epoch.is_multiple_of(self.config.update_interval) {
            self.update()?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Samples one shared minibatch and applies a simultaneous update to every agent.
    pub fn update(&mut self) -> Result<()> {
        let rows = self.replay.sample_rows(self.config.batch_size, &mut self.sample_rng)?;
        let batch = self.replay.gather(&rows);
        let grads = self.compute_grads(&batch)?;
        self.apply(&grads);
        self.updates += 1;
        for (i, l) in self.learners.iter().enumerate() {
            if !l.actor.params.is_finite() || !l.critic.params.is_finite() {
                return Err(Error::NonFinite(format!("agent {} networks diverged at epoch {}", i + 1, self.epoch)));
            }
        }
        Ok(())
    }

    /// TD targets of critic `i`; target actions are supplied per agent.
    pub fn td_target(&self, i: usize, batch: &Batch<T>, target_actions: &[Vec<T>]) -> Result<Vec<T>> {
        let l = &self.learners[i];
        let acts: Vec<&[T]> = target_actions.iter().map(|v| v.as_slice()).collect();
        let x = critic_input(&l.members, batch.size, &batch.next_state, &acts);
        let q_next = l.target_critic.forward_batch(&x, batch.size)?.output;
        let gamma = match self.config.discount {
            DiscountPlacement::Standard => T::lit(self.config.gamma),
            DiscountPlacement::Literal => T::one(),
        };
        Ok((0..batch.size)
            .map(|m| {
                let r = l.reward_set.iter().fold(T::zero(), |acc, &j| acc + batch.reward[j][m]);
                r + gamma * q_next[m]
            })
            .collect())
    }

    /// Target-actor outputs on the next observations, for the agents in `needed`.
    pub fn target_actions(&self, batch: &Batch<T>, needed: &AgentSet) -> Result<Vec<Vec<T>>> {
        (0..self.learners.len())
            .map(|k| {
                if needed.contains(&k) {
                    Ok(self.learners[k].target_actor.forward_batch(&batch.next_obs[k], batch.size)?.output)
                } else {
                    Ok(Vec::new())
                }
            })
            .collect()
    }

    /// Critic loss gradient of agent `i` against targets `y`.
    pub fn critic_grad(&self, i: usize, batch: &Batch<T>, y: &[T]) -> Result<(Params<T>, f64)> {
        let base = self.critic_base(i, batch);
        self.critic_grad_from(i, batch, &base, y)
    }

    /// Critic input of agent `i` on the stored transitions and its first-layer pre-activation.
    pub fn critic_base(&self, i: usize, batch: &Batch<T>) -> CriticBase<T> {
        let l = &self.learners[i];
        let acts: Vec<&[T]> = batch.action.iter().map(|v| v.as_slice()).collect();
        let x = critic_input(&l.members, batch.size, &batch.state, &acts);
        let z1 = l.critic.first_preactivation(&x, batch.size);
        CriticBase { x, z1 }
    }

    fn critic_grad_from(&self, i: usize, batch: &Batch<T>, base: &CriticBase<T>, y: &[T]) -> Result<(Params<T>, f64)> {
        let l = &self.learners[i];
        if y.len() != batch.size {
            return Err(Error::ShapeMismatch(format!("{} targets for a batch of {}", y.len(), batch.size)));
        }
        let cache = l.critic.forward_from_first(base.x.clone(), base.z1.clone(), batch.size);
        let mb = T::lit(batch.size as f64);
        let two = T::lit(2.0);
        let mut loss = 0.0;
        let upstream: Vec<T> = match self.config.discount {
            DiscountPlacement::Standard => cache
                .output
                .iter()
                .zip(y)
                .map(|(&q, &t)| {
                    loss += (q - t).to_f64().unwrap().powi(2);
                    two * (q - t) / mb
                })
                .collect(),
            DiscountPlacement::Literal => {
                let g = T::lit(self.config.gamma);
                cache
                    .output
                    .iter()
                    .zip(y)
                    .map(|(&q, &t)| {
                        loss += (g * q - t).to_f64().unwrap().powi(2);
                        two * g * (g * q - t) / mb
                    })
                    .collect()
            }
        };
        let (grads, _) = l.critic.backward_batch(&cache, &upstream, Want { params: true, input: false })?;
        Ok((grads.expect("requested"), loss / batch.size as f64))
    }

    /// Gradient of `−(1/M) Σ_m Σ_{j∈peers} Q_j(s, a with a_i = π_i(o_i))` w.r.t. actor `i`.
    pub fn actor_grad(&self, i: usize, batch: &Batch<T>) -> Result<Params<T>> {
        let bases: Vec<Option<CriticBase<T>>> = (0..self.learners.len())
            .map(|j| self.learners[i].actor_peers.contains(&j).then(|| self.critic_base(j, batch)))
            .collect();
        let mut only = vec![false; self.learners.len()];
        only[i] = true;
        Ok(self.actor_grads_from(batch, &bases, &only)?.swap_remove(i).expect("requested"))
    }

    /// Actor gradients for the agents flagged in `which`.
    ///
    /// Each peer critic `j` is re-evaluated once per actor `i` it serves, with
    /// `a_i` replaced by `π_i(o_i)`. Only the first-layer pre-activation changes,
    /// by `(π_i(o_i) − a_i)·W₀[:, cols_i]ᵀ`, so the stored pre-activation is shifted
    /// and all actors served by `j` are stacked into one batch.
    fn actor_grads_from(&self, batch: &Batch<T>, bases: &[Option<CriticBase<T>>], which: &[bool]) -> Result<Vec<Option<Params<T>>>> {
        let n = self.learners.len();
        let size = batch.size;
        let mut caches = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            if which[i] {
                let cache = self.learners[i].actor.forward_batch(&batch.obs[i], size)?;
                deltas.push(cache.output.iter().zip(&batch.action[i]).map(|(&p, &b)| p - b).collect::<Vec<T>>());
                caches.push(Some(cache));
            } else {
                deltas.push(Vec::new());
                caches.push(None);
            }
        }
        let mut served: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in (0..n).filter(|&i| which[i]) {
            for &j in &self.learners[i].actor_peers {
                served[j].push(i);
            }
        }
        let mut d_action: Vec<Vec<T>> = (0..n).map(|i| vec![T::zero(); if which[i] { size * self.layout.action[i] } else { 0 }]).collect();
        for (j, actors) in served.iter().enumerate().flat_map(|(j, all)| all.chunks(STACK_ACTORS).map(move |c| (j, c))) {
            let peer = &self.learners[j];
            let base = bases[j].as_ref().ok_or_else(|| Error::Config(format!("critic {} not evaluated", j + 1)))?;
            let fan_in = peer.critic.input_dim();
            let hidden = peer.critic.layer_sizes[1];
            let w0 = &peer.critic.params.weights[0];
            let mut cols_of = Vec::with_capacity(actors.len());
            let mut z1 = Vec::with_capacity(actors.len() * base.z1.len());
            for &i in actors {
                let cols = peer
                    .action_columns(i, &self.layout)
                    .ok_or_else(|| Error::Config(format!("critic {} lacks agent {}", j + 1, i + 1)))?;
                let width = cols.len();
                let offset = z1.len();
                z1.extend_from_slice(&base.z1);
                for m in 0..size {
                    let dm = &deltas[i][m * width..(m + 1) * width];
                    let row = &mut z1[offset + m * hidden..offset + (m + 1) * hidden];
                    for (h, z) in row.iter_mut().enumerate() {
                        let wrow = &w0[h * fan_in + cols.start..h * fan_in + cols.end];
                        *z = *z + wrow.iter().zip(dm).fold(T::zero(), |acc, (&w, &d)| acc + w * d);
                    }
                }
                cols_of.push(cols);
            }
            let stacked = actors.len() * size;
            let upstream = vec![-T::one() / T::lit(size as f64); stacked];
            let pc = peer.critic.forward_from_first(Vec::new(), z1, stacked);
            let dz1 = peer.critic.first_layer_delta(&pc, &upstream);
            for (k, (&i, cols)) in actors.iter().zip(cols_of).enumerate() {
                let block = &dz1[k * size * hidden..(k + 1) * size * hidden];
                let g = peer.critic.input_grad_cols(block, size, cols);
                for (d, v) in d_action[i].iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
        }
        let mut out = Vec::with_capacity(n);
        for (i, cache) in caches.into_iter().enumerate() {
            out.push(match cache {
                Some(c) => {
                    let (g, _) = self.learners[i].actor.backward_batch(&c, &d_action[i], Want { params: true, input: false })?;
                    Some(g.expect("requested"))
                }
                None => None,
            });
        }
        Ok(out)
    }

    /// All critic and actor gradients from the current parameters.
    pub fn compute_grads(&self, batch: &Batch<T>) -> Result<StepGrads<T>> {
        let needed: AgentSet = self.learners.iter().flat_map(|l| l.members.iter().copied()).collect();
        let target_actions = self.target_actions(batch, &needed)?;
        let mut critic = Vec::with_capacity(self.learners.len());
        let mut critic_loss = Vec::with_capacity(self.learners.len());
        let bases: Vec<Option<CriticBase<T>>> = (0..self.learners.len()).map(|j| Some(self.critic_base(j, batch))).collect();
        for (i, base) in bases.iter().enumerate() {
            let y = self.td_target(i, batch, &target_actions)?;
            let (g, loss) = self.critic_grad_from(i, batch, base.as_ref().expect("computed"), &y)?;
            critic.push(g);
            critic_loss.push(loss);
        }
        let actor = self
            .actor_grads_from(batch, &bases, &vec![true; self.learners.len()])?
            .into_iter()
            .map(|g| g.expect("requested"))
            .collect();
        Ok(StepGrads { critic, actor, critic_loss })
    }

    /// Optimizer steps for every agent, then soft target updates.
    pub fn apply(&mut self, grads: &StepGrads<T>) {
        let tau = T::lit(self.config.tau);
        for (i, l) in self.learners.iter_mut().enumerate() {
            l.critic_opt.step(&mut l.critic, &grads.critic[i]);
            l.actor_opt.step(&mut l.actor, &grads.actor[i]);
            l.target_critic.soft_update_from(&l.critic, tau);
            l.target_actor.soft_update_from(&l.actor, tau);
        }
    }

    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn record(&self) -> RunRecord {
        RunRecord::from_steps(
            self.config.variant,
            self.config.seed,
            self.config.episode_length,
            self.step_return.clone(),
            self.max_abs_reward,
            self.updates,
        )
    }

    pub fn checkpoints(&self) -> Vec<AgentCheckpoints> {
        self.learners
            .iter()
            .enumerate()
            .map(|(i, l)| AgentCheckpoints {
                agent: i + 1,
                actor: l.actor.to_checkpoint(),
                critic: l.critic.to_checkpoint(),
                target_actor: l.target_actor.to_checkpoint(),
                target_critic: l.target_critic.to_checkpoint(),
            })
            .collect()
    }
}

/// Trains one run and returns its metrics and final networks.
pub fn train_with_checkpoints(env: &dyn EnvModel, config: &TrainConfig) -> Result<(RunRecord, Vec<AgentCheckpoints>)> {
    if config.episode_length != env.episode_length() {
        return Err(Error::Config(format!(
            "episode length {} differs from the environment's {}",
            config.episode_length,
            env.episode_length()
        )));
    }
    fn go<T: Real>(env: &dyn EnvModel, config: &TrainConfig) -> Result<(RunRecord, Vec<AgentCheckpoints>)> {
        let mut t = Trainer::<T>::new(env, config.clone())?;
        t.run()?;
        Ok((t.record(), t.checkpoints()))
    }
    match config.precision {
        Precision::F32 => go::<f32>(env, config),
        Precision::F64 => go::<f64>(env, config),
    }
}

pub fn train(env: &dyn EnvModel, config: &TrainConfig) -> Result<RunRecord> {
    Ok(train_with_checkpoints(env, config)?.0)
}
