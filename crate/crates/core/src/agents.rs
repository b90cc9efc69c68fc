//! Offline trainers: behavior cloning, conservative Q-learning and TD3-BC.
//!
//! Everything here works in normalized units: states and actions are Z-scored
//! with the dataset's [`NormStats`], and the actor emits
//! `action_bound * tanh(·)` so its actions lie within `±action_bound`
//! standard deviations of the logged rate moves. Rewards are used as-is.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{EvalError, RatePolicy};
use crate::ingest::FeatureRow;
use crate::mdp::{
    self, ActionVector, NormStats, StateVector, TransitionDataset, ACTION_DIM, STATE_DIM,
};
use crate::neuralnet::{AdamState, ForwardCache, Mlp, NetError, OutputActivation, ParamBuffers};

/// Checkpoint format version.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CRITIC_INPUT: usize = STATE_DIM + ACTION_DIM;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config is for {found}, expected {expected}")]
    WrongAlgorithm {
        expected: Algorithm,
        found: Algorithm,
    },
    #[error("non-finite {what} at step {step}")]
    Diverged { what: &'static str, step: u64 },
    #[error("bundle has no critics")]
    NoCritics,
    #[error("checkpoint version {0} is not supported")]
    CheckpointVersion(u32),
    #[error("checkpoint normalization fingerprint does not match its statistics")]
    FingerprintMismatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mdp(#[from] mdp::MdpError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bc,
    Cql,
    Td3bc,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Bc => "bc",
            Algorithm::Cql => "cql",
            Algorithm::Td3bc => "td3bc",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "bc" => Some(Algorithm::Bc),
            "cql" => Some(Algorithm::Cql),
            "td3bc" | "td3-bc" | "td3_bc" => Some(Algorithm::Td3bc),
            _ => None,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Bc => "BC",
            Algorithm::Cql => "CQL",
            Algorithm::Td3bc => "TD3-BC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub batch_size: usize,
    pub steps: u64,
    pub discount_gamma: f64,
    pub tau_soft: f64,
    pub policy_delay: u64,
    /// Target-policy smoothing noise, normalized action units.
    pub policy_noise_sigma: f64,
    pub noise_clip: f64,
    pub cql_alpha: f64,
    pub cql_num_sampled_actions: usize,
    pub cql_lagrange: bool,
    /// Penalty level the Lagrange multiplier steers towards.
    pub cql_tau_threshold: f64,
    /// Step size of the multiplier's gradient ascent.
    pub cql_lagrange_lr: f64,
    pub td3bc_alpha: f64,
    pub bc_learning_rate: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub seed: u64,
    /// Largest |action| per component in normalized units, i.e. a multiple of
    /// the logged action standard deviation.
    pub action_bound: f64,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Td3bc,
            batch_size: 256,
            steps: 20_000,
            discount_gamma: 0.99,
            tau_soft: 0.005,
            policy_delay: 2,
            policy_noise_sigma: 0.2,
            noise_clip: 0.5,
            cql_alpha: 1.0,
            cql_num_sampled_actions: 10,
            cql_lagrange: false,
            cql_tau_threshold: 5.0,
            cql_lagrange_lr: 1e-3,
            td3bc_alpha: 2.5,
            bc_learning_rate: 3e-5,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            seed: 0,
            action_bound: 5.0,
            hidden_dims: vec![256, 256],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(AgentError::InvalidConfig(msg.to_string()));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !(self.discount_gamma > 0.0 && self.discount_gamma <= 1.0) {
            return fail("discount_gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau_soft) {
            return fail("tau_soft must lie in [0, 1]");
        }
        if self.policy_delay < 1 {
            return fail("policy_delay must be >= 1");
        }
        if !(self.action_bound > 0.0) {
            return fail("action_bound must be positive");
        }
        if self.cql_num_sampled_actions < 1 {
            return fail("cql_num_sampled_actions must be >= 1");
        }
        if self.policy_noise_sigma < 0.0 || self.noise_clip < 0.0 {
            return fail("noise parameters must be non-negative");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return fail("hidden_dims must be non-empty and positive");
        }
        let rates = [
            self.bc_learning_rate,
            self.actor_lr,
            self.critic_lr,
            self.cql_lagrange_lr,
        ];
        if !rates.iter().all(|r| *r > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.cql_alpha < 0.0 || self.td3bc_alpha < 0.0 {
            return fail("cql_alpha and td3bc_alpha must be non-negative");
        }
        Ok(())
    }

    fn actor_dims(&self) -> Vec<usize> {
        let mut dims = vec![STATE_DIM];
        dims.extend(&self.hidden_dims);
        dims.push(ACTION_DIM);
        dims
    }

    fn critic_dims(&self) -> Vec<usize> {
        let mut dims = vec![CRITIC_INPUT];
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims
    }

    /// Distinct initialization seed per network role.
    fn init_seed(&self, role: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(role)
    }
}

/// Transitions in normalized units, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDataset {
    len: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
}

impl NormalizedDataset {
    pub fn new(ds: &TransitionDataset, stats: &NormStats) -> Self {
        let mut out = NormalizedDataset {
            len: ds.len(),
            states: Vec::with_capacity(ds.len() * STATE_DIM),
            actions: Vec::with_capacity(ds.len() * ACTION_DIM),
            rewards: Vec::with_capacity(ds.len()),
            next_states: Vec::with_capacity(ds.len() * STATE_DIM),
            dones: Vec::with_capacity(ds.len()),
        };
        for t in &ds.transitions {
            out.states.extend(stats.normalize_state(&t.state));
            out.actions.extend(stats.normalize_action(&t.action));
            out.rewards.push(t.reward);
            out.next_states.extend(stats.normalize_state(&t.next_state));
            out.dones.push(t.done);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Batch made of the given transition indices.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut b = Batch {
            indices: indices.to_vec(),
            states: Vec::with_capacity(indices.len() * STATE_DIM),
            actions: Vec::with_capacity(indices.len() * ACTION_DIM),
            rewards: Vec::with_capacity(indices.len()),
            next_states: Vec::with_capacity(indices.len() * STATE_DIM),
            dones: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            b.states
                .extend_from_slice(&self.states[i * STATE_DIM..(i + 1) * STATE_DIM]);
            b.actions
                .extend_from_slice(&self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            b.rewards.push(self.rewards[i]);
            b.next_states
                .extend_from_slice(&self.next_states[i * STATE_DIM..(i + 1) * STATE_DIM]);
            b.dones.push(self.dones[i]);
        }
        b
    }
}

/// A mini-batch in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Uniform sample of `size` transitions with replacement.
pub fn sample_batch(ds: &NormalizedDataset, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if ds.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let indices: Vec<usize> = (0..size).map(|_| rng.random_range(0..ds.len())).collect();
    Ok(ds.gather(&indices))
}

/// Row-wise concatenation of states and actions.
pub fn critic_input(states: &[f64], actions: &[f64]) -> Vec<f64> {
    let n = states.len() / STATE_DIM;
    let mut x = Vec::with_capacity(n * CRITIC_INPUT);
    for i in 0..n {
        x.extend_from_slice(&states[i * STATE_DIM..(i + 1) * STATE_DIM]);
        x.extend_from_slice(&actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
    }
    x
}

/// Actor output scaled to `±action_bound`, with the forward cache.
fn actor_forward(actor: &Mlp, states: &[f64], bound: f64) -> Result<(ForwardCache, Vec<f64>)> {
    let n = states.len() / STATE_DIM;
    let cache = actor.forward_batch(states, n)?;
    let actions = cache.output().iter().map(|y| bound * y).collect();
    Ok((cache, actions))
}

fn q_values(critic: &Mlp, states: &[f64], actions: &[f64]) -> Result<(ForwardCache, Vec<f64>)> {
    let x = critic_input(states, actions);
    let cache = critic.forward_batch(&x, states.len() / STATE_DIM)?;
    let q = cache.output().to_vec();
    Ok((cache, q))
}

/// Gradient of Σ upstream·Q with respect to the action inputs.
fn action_gradient(critic: &Mlp, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
    let back = critic.backward(cache, upstream)?;
    Ok(back
        .input_grad
        .chunks_exact(CRITIC_INPUT)
        .flat_map(|row| row[STATE_DIM..].iter().copied())
        .collect())
}

/// Loss value with gradients for one network.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ParamBuffers,
}

/// Behavior-cloning loss `mean_b ‖π(s_b) − a_b‖²` and its actor gradients.
pub fn bc_loss(batch: &Batch, actor: &Mlp, cfg: &TrainConfig) -> Result<LossGrad> {
    let n = batch.len();
    let (cache, pi) = actor_forward(actor, &batch.states, cfg.action_bound)?;
    let inv = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; pi.len()];
    for (i, g) in upstream.iter_mut().enumerate() {
        let diff = pi[i] - batch.actions[i];
        loss += diff * diff;
        *g = 2.0 * diff * inv;
    }
    for g in &mut upstream {
        *g *= cfg.action_bound;
    }
    let back = actor.backward(&cache, &upstream)?;
    Ok(LossGrad {
        loss: loss * inv,
        grads: back.grads,
    })
}

/// Clipped Gaussian target-policy noise, one value per action component.
pub fn sample_target_noise(rng: &mut ChaCha8Rng, batch: usize, cfg: &TrainConfig) -> Vec<f64> {
    (0..batch * ACTION_DIM)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (cfg.policy_noise_sigma * z).clamp(-cfg.noise_clip, cfg.noise_clip)
        })
        .collect()
}

/// How target critics are combined in the Bellman backup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetReduction {
    /// min(Q₁′, Q₂′), the clipped double-Q target.
    Min,
    Critic1,
    Critic2,
}

/// Online and target networks of an actor-critic bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target_actor: Mlp,
    pub target_critic1: Mlp,
    pub target_critic2: Mlp,
    pub critic1_optimizer: AdamState,
    pub critic2_optimizer: AdamState,
}

/// Bellman targets `y = r + (1 − done) γ min(Q₁′, Q₂′)(s′, ã′)` where
/// `ã′ = clip(π′(s′) + noise, ±action_bound)`.
pub fn td3_target(
    batch: &Batch,
    critics: &Critics,
    cfg: &TrainConfig,
    noise: &[f64],
) -> Result<Vec<f64>> {
    td3_target_with(batch, critics, cfg, noise, TargetReduction::Min)
}

pub fn td3_target_with(
    batch: &Batch,
    critics: &Critics,
    cfg: &TrainConfig,
    noise: &[f64],
    reduction: TargetReduction,
) -> Result<Vec<f64>> {
    let (_, mut next_actions) =
        actor_forward(&critics.target_actor, &batch.next_states, cfg.action_bound)?;
    if noise.len() != next_actions.len() {
        return Err(NetError::DimensionMismatch {
            expected: next_actions.len(),
            got: noise.len(),
        }
        .into());
    }
    for (a, e) in next_actions.iter_mut().zip(noise) {
        *a = (*a + e).clamp(-cfg.action_bound, cfg.action_bound);
    }
    let (_, q1) = q_values(&critics.target_critic1, &batch.next_states, &next_actions)?;
    let (_, q2) = q_values(&critics.target_critic2, &batch.next_states, &next_actions)?;
    Ok((0..batch.len())
        .map(|i| {
            if batch.dones[i] {
                return batch.rewards[i];
            }
            let next = match reduction {
                TargetReduction::Min => q1[i].min(q2[i]),
                TargetReduction::Critic1 => q1[i],
                TargetReduction::Critic2 => q2[i],
            };
            batch.rewards[i] + cfg.discount_gamma * next
        })
        .collect())
}

/// Plain Bellman loss `mean_b (Q(s_b, a_b) − y_b)²`.
pub fn bellman_loss(batch: &Batch, critic: &Mlp, targets: &[f64]) -> Result<LossGrad> {
    let (cache, q) = q_values(critic, &batch.states, &batch.actions)?;
    let inv = 1.0 / batch.len().max(1) as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; q.len()];
    for i in 0..q.len() {
        let diff = q[i] - targets[i];
        loss += diff * diff;
        upstream[i] = 2.0 * diff * inv;
    }
    let back = critic.backward(&cache, &upstream)?;
    Ok(LossGrad {
        loss: loss * inv,
        grads: back.grads,
    })
}

/// Candidate actions for the conservative penalty, `per_state` per batch row.
/// The dataset action is always the last candidate of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CqlActionSet {
    pub per_state: usize,
    /// Shape `(batch, per_state, ACTION_DIM)`.
    pub actions: Vec<f64>,
}

impl CqlActionSet {
    /// Only the dataset actions.
    pub fn dataset_only(batch: &Batch) -> Self {
        CqlActionSet {
            per_state: 1,
            actions: batch.actions.clone(),
        }
    }

    /// Uniform draws within `±action_bound`, the current policy action, then
    /// the dataset action.
    pub fn sample(
        batch: &Batch,
        actor: &Mlp,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (_, policy_actions) = actor_forward(actor, &batch.states, cfg.action_bound)?;
        let per_state = cfg.cql_num_sampled_actions + 2;
        let mut actions = Vec::with_capacity(batch.len() * per_state * ACTION_DIM);
        for i in 0..batch.len() {
            for _ in 0..cfg.cql_num_sampled_actions * ACTION_DIM {
                actions.push(rng.random_range(-cfg.action_bound..=cfg.action_bound));
            }
            actions.extend_from_slice(&policy_actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            actions.extend_from_slice(&batch.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
        }
        Ok(CqlActionSet { per_state, actions })
    }
}

#[derive(Debug, Clone)]
pub struct CqlLoss {
    /// `bellman + weight · penalty`
    pub loss: f64,
    pub bellman: f64,
    /// `mean_b [logsumexp_k Q(s_b, a_bk) − Q(s_b, a_b)]`
    pub penalty: f64,
    pub grads: ParamBuffers,
}

/// Bellman loss plus the weighted conservative penalty, from one forward
/// pass over every (state, candidate action) pair.
pub fn cql_critic_loss(
    batch: &Batch,
    critic: &Mlp,
    targets: &[f64],
    set: &CqlActionSet,
    weight: f64,
) -> Result<CqlLoss> {
    let n = batch.len();
    let k = set.per_state;
    if set.actions.len() != n * k * ACTION_DIM {
        return Err(NetError::DimensionMismatch {
            expected: n * k * ACTION_DIM,
            got: set.actions.len(),
        }
        .into());
    }
    let mut states = Vec::with_capacity(n * k * STATE_DIM);
    for i in 0..n {
        for _ in 0..k {
            states.extend_from_slice(&batch.states[i * STATE_DIM..(i + 1) * STATE_DIM]);
        }
    }
    let (cache, q) = q_values(critic, &states, &set.actions)?;
    let inv = 1.0 / n.max(1) as f64;
    let mut upstream = vec![0.0; n * k];
    let (mut bellman, mut penalty) = (0.0, 0.0);
    for i in 0..n {
        let row = &q[i * k..(i + 1) * k];
        let q_data = row[k - 1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        penalty += lse - q_data;
        let diff = q_data - targets[i];
        bellman += diff * diff;
        let g = &mut upstream[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = weight * inv * ((row[j] - max).exp() / sum);
        }
        g[k - 1] += 2.0 * diff * inv - weight * inv;
    }
    let back = critic.backward(&cache, &upstream)?;
    let (bellman, penalty) = (bellman * inv, penalty * inv);
    Ok(CqlLoss {
        loss: bellman + weight * penalty,
        bellman,
        penalty,
        grads: back.grads,
    })
}

/// Gradient-ascent step on `multiplier · (penalty − τ)`, clipped at zero.
pub fn cql_lagrange_step(penalty: f64, multiplier: f64, cfg: &TrainConfig) -> f64 {
    (multiplier + cfg.cql_lagrange_lr * (penalty - cfg.cql_tau_threshold)).max(0.0)
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    /// Mean Q₁ at the policy actions.
    pub q_mean: f64,
    pub bc: f64,
    pub grads: ParamBuffers,
}

/// `−λ mean Q₁(s, π(s)) + mean ‖π(s) − a‖²` with
/// `λ = td3bc_alpha / (mean |Q₁(s, π(s))| + 1e-8)` held constant.
pub fn td3bc_actor_loss(
    batch: &Batch,
    actor: &Mlp,
    critic1: &Mlp,
    cfg: &TrainConfig,
) -> Result<ActorLoss> {
    let n = batch.len();
    let inv = 1.0 / n.max(1) as f64;
    let (actor_cache, pi) = actor_forward(actor, &batch.states, cfg.action_bound)?;
    let (critic_cache, q) = q_values(critic1, &batch.states, &pi)?;
    let q_mean = q.iter().sum::<f64>() * inv;
    let q_abs_mean = q.iter().map(|v| v.abs()).sum::<f64>() * inv;
    let lambda = cfg.td3bc_alpha / (q_abs_mean + 1e-8);
    let dq_da = action_gradient(critic1, &critic_cache, &vec![1.0; n])?;

    let mut bc = 0.0;
    let mut upstream = vec![0.0; pi.len()];
    for (i, g) in upstream.iter_mut().enumerate() {
        let diff = pi[i] - batch.actions[i];
        bc += diff * diff;
        *g = 2.0 * diff * inv;
        *g += -lambda * dq_da[i] * inv;
    }
    for g in &mut upstream {
        *g *= cfg.action_bound;
    }
    let back = actor.backward(&actor_cache, &upstream)?;
    let bc = bc * inv;
    Ok(ActorLoss {
        loss: -lambda * q_mean + bc,
        q_mean,
        bc,
        grads: back.grads,
    })
}

/// `−mean min(Q₁, Q₂)(s, π(s))`, the conservative actor objective.
pub fn min_q_actor_loss(
    batch: &Batch,
    actor: &Mlp,
    critic1: &Mlp,
    critic2: &Mlp,
    cfg: &TrainConfig,
) -> Result<LossGrad> {
    let n = batch.len();
    let inv = 1.0 / n.max(1) as f64;
    let (actor_cache, pi) = actor_forward(actor, &batch.states, cfg.action_bound)?;
    let (c1, q1) = q_values(critic1, &batch.states, &pi)?;
    let (c2, q2) = q_values(critic2, &batch.states, &pi)?;
    let mut up1 = vec![0.0; n];
    let mut up2 = vec![0.0; n];
    let mut q_min_sum = 0.0;
    for i in 0..n {
        if q1[i] <= q2[i] {
            up1[i] = -inv;
            q_min_sum += q1[i];
        } else {
            up2[i] = -inv;
            q_min_sum += q2[i];
        }
    }
    let g1 = action_gradient(critic1, &c1, &up1)?;
    let g2 = action_gradient(critic2, &c2, &up2)?;
    let upstream: Vec<f64> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| (a + b) * cfg.action_bound)
        .collect();
    let back = actor.backward(&actor_cache, &upstream)?;
    Ok(LossGrad {
        loss: -q_min_sum * inv,
        grads: back.grads,
    })
}

/// `target ← τ·online + (1 − τ)·target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau_soft: f64) -> Result<()> {
    Ok(target.soft_update_from(online, tau_soft)?)
}

/// Everything needed to act and to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub algorithm: Algorithm,
    pub actor: Mlp,
    pub actor_optimizer: AdamState,
    /// Absent for behavior cloning.
    pub critics: Option<Critics>,
    pub lagrange_multiplier: Option<f64>,
    pub norm_stats: NormStats,
    pub train_config: TrainConfig,
}

impl PolicyBundle {
    /// Freshly initialized networks for `cfg.algorithm`.
    pub fn init(cfg: &TrainConfig, norm_stats: NormStats) -> Result<Self> {
        cfg.validate()?;
        let actor = Mlp::new(&cfg.actor_dims(), OutputActivation::Tanh, cfg.init_seed(1))?;
        let actor_lr = match cfg.algorithm {
            Algorithm::Bc => cfg.bc_learning_rate,
            _ => cfg.actor_lr,
        };
        let actor_optimizer = AdamState::new(&actor, actor_lr);
        let critics = match cfg.algorithm {
            Algorithm::Bc => None,
            _ => {
                let critic1 = Mlp::new(
                    &cfg.critic_dims(),
                    OutputActivation::Identity,
                    cfg.init_seed(2),
                )?;
                let critic2 = Mlp::new(
                    &cfg.critic_dims(),
                    OutputActivation::Identity,
                    cfg.init_seed(3),
                )?;
                Some(Critics {
                    target_actor: actor.clone(),
                    target_critic1: critic1.clone(),
                    target_critic2: critic2.clone(),
                    critic1_optimizer: AdamState::new(&critic1, cfg.critic_lr),
                    critic2_optimizer: AdamState::new(&critic2, cfg.critic_lr),
                    critic1,
                    critic2,
                })
            }
        };
        Ok(PolicyBundle {
            algorithm: cfg.algorithm,
            actor,
            actor_optimizer,
            critics,
            lagrange_multiplier: (cfg.algorithm == Algorithm::Cql && cfg.cql_lagrange)
                .then_some(cfg.cql_alpha),
            norm_stats,
            train_config: cfg.clone(),
        })
    }

    /// Action in natural units (rate change per day) for a raw state.
    pub fn act(&self, state: &StateVector) -> Result<ActionVector> {
        let z = self.norm_stats.normalize_state(state);
        let y = self.actor.forward(&z)?;
        let bound = self.train_config.action_bound;
        Ok(self
            .norm_stats
            .denormalize_action(&[bound * y[0], bound * y[1]]))
    }

    /// Normalized action before de-normalization; always within `±action_bound`.
    pub fn act_normalized(&self, state: &StateVector) -> Result<[f64; ACTION_DIM]> {
        let z = self.norm_stats.normalize_state(state);
        let y = self.actor.forward(&z)?;
        let bound = self.train_config.action_bound;
        Ok([bound * y[0], bound * y[1]])
    }
}

impl RatePolicy for PolicyBundle {
    fn name(&self) -> String {
        self.algorithm.tag().to_string()
    }

    fn adjust(&self, row: &FeatureRow, _current: (f64, f64)) -> Result<ActionVector, EvalError> {
        let state = mdp::assemble_state(row).map_err(|e| EvalError::Policy(e.to_string()))?;
        self.act(&state)
            .map_err(|e| EvalError::Policy(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub cql_penalty: Option<f64>,
    pub lagrange_multiplier: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn actor_updates(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.actor_loss.is_some())
            .count()
    }

    pub fn actor_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.actor_loss).collect()
    }

    pub fn critic_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.critic_loss).collect()
    }

    /// CSV `step,actor_loss,critic_loss,penalty,multiplier`; absent values
    /// are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "actor_loss", "critic_loss", "penalty", "multiplier"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                cell(r.actor_loss),
                cell(r.critic_loss),
                cell(r.cql_penalty),
                cell(r.lagrange_multiplier),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn check_finite(value: f64, what: &'static str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AgentError::Diverged { what, step })
    }
}

fn prepare(
    ds: &TransitionDataset,
    stats: &NormStats,
    cfg: &TrainConfig,
    expected: Algorithm,
) -> Result<(NormalizedDataset, PolicyBundle, ChaCha8Rng)> {
    if cfg.algorithm != expected {
        return Err(AgentError::WrongAlgorithm {
            expected,
            found: cfg.algorithm,
        });
    }
    if ds.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let bundle = PolicyBundle::init(cfg, stats.clone())?;
    Ok((
        NormalizedDataset::new(ds, stats),
        bundle,
        ChaCha8Rng::seed_from_u64(cfg.seed),
    ))
}

/// Trains with the algorithm named in `cfg`.
pub fn train(
    ds: &TransitionDataset,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<(PolicyBundle, TrainLog)> {
    match cfg.algorithm {
        Algorithm::Bc => train_bc(ds, stats, cfg),
        Algorithm::Cql => train_cql(ds, stats, cfg),
        Algorithm::Td3bc => train_td3bc(ds, stats, cfg),
    }
}

/// Supervised regression of logged actions on states.
pub fn train_bc(
    ds: &TransitionDataset,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<(PolicyBundle, TrainLog)> {
    let (data, mut bundle, mut rng) = prepare(ds, stats, cfg, Algorithm::Bc)?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, &mut rng)?;
        let lg = bc_loss(&batch, &bundle.actor, cfg)?;
        bundle
            .actor_optimizer
            .update(&mut bundle.actor, &lg.grads)?;
        log.records.push(TrainRecord {
            step,
            actor_loss: Some(check_finite(lg.loss, "actor loss", step)?),
            critic_loss: None,
            cql_penalty: None,
            lagrange_multiplier: None,
        });
    }
    Ok((bundle, log))
}

fn update_critics_bellman(batch: &Batch, critics: &mut Critics, targets: &[f64]) -> Result<f64> {
    let l1 = bellman_loss(batch, &critics.critic1, targets)?;
    let l2 = bellman_loss(batch, &critics.critic2, targets)?;
    critics
        .critic1_optimizer
        .update(&mut critics.critic1, &l1.grads)?;
    critics
        .critic2_optimizer
        .update(&mut critics.critic2, &l2.grads)?;
    Ok(l1.loss + l2.loss)
}

fn soft_update_targets(actor: &Mlp, critics: &mut Critics, tau: f64) -> Result<()> {
    soft_update(&mut critics.target_actor, actor, tau)?;
    soft_update(&mut critics.target_critic1, &critics.critic1, tau)?;
    soft_update(&mut critics.target_critic2, &critics.critic2, tau)?;
    Ok(())
}

/// TD3 with a behavior-cloning term in the delayed actor update.
pub fn train_td3bc(
    ds: &TransitionDataset,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<(PolicyBundle, TrainLog)> {
    let (data, mut bundle, mut rng) = prepare(ds, stats, cfg, Algorithm::Td3bc)?;
    let mut critics = bundle.critics.take().ok_or(AgentError::NoCritics)?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, &mut rng)?;
        let noise = sample_target_noise(&mut rng, batch.len(), cfg);
        let targets = td3_target(&batch, &critics, cfg, &noise)?;
        let critic_loss = update_critics_bellman(&batch, &mut critics, &targets)?;

        let mut actor_loss = None;
        if (step + 1) % cfg.policy_delay == 0 {
            let al = td3bc_actor_loss(&batch, &bundle.actor, &critics.critic1, cfg)?;
            bundle
                .actor_optimizer
                .update(&mut bundle.actor, &al.grads)?;
            soft_update_targets(&bundle.actor, &mut critics, cfg.tau_soft)?;
            actor_loss = Some(check_finite(al.loss, "actor loss", step)?);
        }
        log.records.push(TrainRecord {
            step,
            actor_loss,
            critic_loss: Some(check_finite(critic_loss, "critic loss", step)?),
            cql_penalty: None,
            lagrange_multiplier: None,
        });
    }
    bundle.critics = Some(critics);
    Ok((bundle, log))
}

/// Conservative Q-learning with twin critics and a deterministic actor that
/// maximizes the smaller critic.
pub fn train_cql(
    ds: &TransitionDataset,
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<(PolicyBundle, TrainLog)> {
    let (data, mut bundle, mut rng) = prepare(ds, stats, cfg, Algorithm::Cql)?;
    let mut critics = bundle.critics.take().ok_or(AgentError::NoCritics)?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(&data, cfg.batch_size, &mut rng)?;
        let noise = sample_target_noise(&mut rng, batch.len(), cfg);
        let targets = td3_target(&batch, &critics, cfg, &noise)?;
        let set = CqlActionSet::sample(&batch, &bundle.actor, cfg, &mut rng)?;
        let weight = bundle.lagrange_multiplier.unwrap_or(cfg.cql_alpha);
        let l1 = cql_critic_loss(&batch, &critics.critic1, &targets, &set, weight)?;
        let l2 = cql_critic_loss(&batch, &critics.critic2, &targets, &set, weight)?;
        critics
            .critic1_optimizer
            .update(&mut critics.critic1, &l1.grads)?;
        critics
            .critic2_optimizer
            .update(&mut critics.critic2, &l2.grads)?;
        let penalty = 0.5 * (l1.penalty + l2.penalty);
        if let Some(m) = bundle.lagrange_multiplier.as_mut() {
            *m = cql_lagrange_step(penalty, *m, cfg);
        }

        let al = min_q_actor_loss(
            &batch,
            &bundle.actor,
            &critics.critic1,
            &critics.critic2,
            cfg,
        )?;
        bundle
            .actor_optimizer
            .update(&mut bundle.actor, &al.grads)?;
        soft_update_targets(&bundle.actor, &mut critics, cfg.tau_soft)?;

        log.records.push(TrainRecord {
            step,
            actor_loss: Some(check_finite(al.loss, "actor loss", step)?),
            critic_loss: Some(check_finite(l1.loss + l2.loss, "critic loss", step)?),
            cql_penalty: Some(check_finite(penalty, "cql penalty", step)?),
            lagrange_multiplier: bundle.lagrange_multiplier,
        });
    }
    bundle.critics = Some(critics);
    Ok((bundle, log))
}

/// Versioned on-disk form of a trained bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub algorithm: Algorithm,
    pub norm_stats_fingerprint: String,
    pub bundle: PolicyBundle,
}

impl Checkpoint {
    pub fn new(bundle: PolicyBundle) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            algorithm: bundle.algorithm,
            norm_stats_fingerprint: bundle.norm_stats.fingerprint(),
            bundle,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(AgentError::CheckpointVersion(ckpt.format_version));
        }
        if ckpt.norm_stats_fingerprint != ckpt.bundle.norm_stats.fingerprint() {
            return Err(AgentError::FingerprintMismatch);
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{RewardConfig, Transition};

    fn tiny_cfg(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            batch_size: 8,
            steps: 10,
            hidden_dims: vec![8, 8],
            ..TrainConfig::default()
        }
    }

    fn toy_dataset(n: usize) -> TransitionDataset {
        let transitions = (0..n)
            .map(|i| {
                let x = i as f64;
                let mut s = [0.0; STATE_DIM];
                let mut ns = [0.0; STATE_DIM];
                for d in 0..STATE_DIM {
                    s[d] = (x * 0.37 + d as f64).sin();
                    ns[d] = ((x + 1.0) * 0.37 + d as f64).sin();
                }
                Transition {
                    state: StateVector(s),
                    action: ActionVector::new(1e-3 * (x * 0.9).cos(), 2e-3 * (x * 0.5).sin()),
                    reward: -0.01 * (x * 0.2).cos().abs(),
                    next_state: StateVector(ns),
                    done: i + 1 == n,
                }
            })
            .collect();
        TransitionDataset {
            pool_id: "toy".into(),
            reward_config: RewardConfig::default(),
            transitions,
        }
    }

    fn setup(algorithm: Algorithm) -> (NormalizedDataset, PolicyBundle, TrainConfig) {
        let ds = toy_dataset(30);
        let stats = NormStats::fit(&ds).unwrap();
        let cfg = tiny_cfg(algorithm);
        let bundle = PolicyBundle::init(&cfg, stats.clone()).unwrap();
        (NormalizedDataset::new(&ds, &stats), bundle, cfg)
    }

    #[test]
    fn sampling_is_seeded() {
        let (data, _, _) = setup(Algorithm::Bc);
        let a = sample_batch(&data, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_batch(&data, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.indices, b.indices);
        let empty = sample_batch(&data, 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(empty.is_empty());
        let big = sample_batch(&data, 256, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(big.len(), 256);
        assert!(big.indices.iter().all(|&i| i < 30));
    }

    #[test]
    fn sampling_empty_dataset_fails() {
        let ds = toy_dataset(0);
        let stats = NormStats::fit(&toy_dataset(3)).unwrap();
        let data = NormalizedDataset::new(&ds, &stats);
        assert!(matches!(
            sample_batch(&data, 4, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(AgentError::EmptyDataset)
        ));
    }

    #[test]
    fn terminal_targets_equal_rewards() {
        let (data, bundle, cfg) = setup(Algorithm::Td3bc);
        let batch = data.gather(&[29, 29, 3]);
        let noise = vec![0.0; 6];
        let y = td3_target(&batch, bundle.critics.as_ref().unwrap(), &cfg, &noise).unwrap();
        assert_eq!(y[0], batch.rewards[0]);
        assert_eq!(y[1], batch.rewards[1]);
        assert_ne!(y[2], batch.rewards[2]);
    }

    #[test]
    fn target_hand_arithmetic() {
        // constant critics Q1' = 2, Q2' = 3 via biases on zeroed networks
        let (data, bundle, mut cfg) = setup(Algorithm::Td3bc);
        cfg.discount_gamma = 0.99;
        let mut critics = bundle.critics.unwrap();
        critics.target_critic1 =
            Mlp::zeros(&cfg.critic_dims(), OutputActivation::Identity).unwrap();
        critics.target_critic2 = critics.target_critic1.clone();
        critics
            .target_critic1
            .layers_mut()
            .last_mut()
            .unwrap()
            .biases[0] = 2.0;
        critics
            .target_critic2
            .layers_mut()
            .last_mut()
            .unwrap()
            .biases[0] = 3.0;
        let mut batch = data.gather(&[0]);
        batch.rewards[0] = 1.0;
        let y = td3_target(&batch, &critics, &cfg, &[0.0, 0.0]).unwrap();
        assert!((y[0] - 2.98).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_targets_repeat() {
        let (data, bundle, mut cfg) = setup(Algorithm::Td3bc);
        cfg.policy_noise_sigma = 0.0;
        let batch = data.gather(&[1, 2, 3, 4]);
        let critics = bundle.critics.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n1 = sample_target_noise(&mut rng, 4, &cfg);
        let n2 = sample_target_noise(&mut rng, 4, &cfg);
        assert!(n1.iter().chain(&n2).all(|v| *v == 0.0));
        assert_eq!(
            td3_target(&batch, critics, &cfg, &n1).unwrap(),
            td3_target(&batch, critics, &cfg, &n2).unwrap()
        );
    }

    #[test]
    fn twin_min_is_below_single_critic_targets() {
        let (data, bundle, cfg) = setup(Algorithm::Td3bc);
        let critics = bundle.critics.as_ref().unwrap();
        let batch = data.gather(&(0..30).collect::<Vec<_>>());
        let noise = sample_target_noise(&mut ChaCha8Rng::seed_from_u64(2), 30, &cfg);
        let min = td3_target_with(&batch, critics, &cfg, &noise, TargetReduction::Min).unwrap();
        let one = td3_target_with(&batch, critics, &cfg, &noise, TargetReduction::Critic1).unwrap();
        let two = td3_target_with(&batch, critics, &cfg, &noise, TargetReduction::Critic2).unwrap();
        for i in 0..30 {
            assert!(min[i] <= one[i] && min[i] <= two[i]);
        }
    }

    #[test]
    fn noise_is_clipped() {
        let cfg = TrainConfig {
            policy_noise_sigma: 10.0,
            noise_clip: 0.5,
            ..TrainConfig::default()
        };
        let noise = sample_target_noise(&mut ChaCha8Rng::seed_from_u64(0), 100, &cfg);
        assert!(noise.iter().all(|v| v.abs() <= 0.5));
        assert!(noise.iter().any(|v| v.abs() == 0.5));
    }

    #[test]
    fn penalty_of_singleton_set_is_zero() {
        let (data, bundle, _) = setup(Algorithm::Cql);
        let batch = data.gather(&[0, 5, 9]);
        let critic = &bundle.critics.as_ref().unwrap().critic1;
        let set = CqlActionSet::dataset_only(&batch);
        let l = cql_critic_loss(&batch, critic, &[0.0; 3], &set, 1.0).unwrap();
        assert_eq!(l.penalty, 0.0);
    }

    #[test]
    fn penalty_of_two_equal_values_is_ln2() {
        let (data, _, cfg) = setup(Algorithm::Cql);
        // critic that ignores the action inputs
        let mut critic = Mlp::new(&cfg.critic_dims(), OutputActivation::Identity, 5).unwrap();
        let first = &mut critic.layers_mut()[0];
        for o in 0..first.out_dim {
            for a in STATE_DIM..CRITIC_INPUT {
                first.weights[o * CRITIC_INPUT + a] = 0.0;
            }
        }
        let batch = data.gather(&[0, 1]);
        let mut actions = Vec::new();
        for i in 0..2 {
            actions.extend([0.7, -1.3]);
            actions.extend_from_slice(&batch.actions[i * 2..i * 2 + 2]);
        }
        let set = CqlActionSet {
            per_state: 2,
            actions,
        };
        let l = cql_critic_loss(&batch, &critic, &[0.0; 2], &set, 1.0).unwrap();
        assert!((l.penalty - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_cql_is_plain_bellman() {
        let (data, bundle, cfg) = setup(Algorithm::Cql);
        let critic = &bundle.critics.as_ref().unwrap().critic1;
        let batch = data.gather(&[0, 3, 7, 11, 20]);
        let targets = [0.1, -0.2, 0.3, 0.0, -0.05];
        let set = CqlActionSet::sample(
            &batch,
            &bundle.actor,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let cql = cql_critic_loss(&batch, critic, &targets, &set, 0.0).unwrap();
        let plain = bellman_loss(&batch, critic, &targets).unwrap();
        assert!((cql.loss - plain.loss).abs() < 1e-10);
        assert!(cql.grads.max_abs_diff(&plain.grads) < 1e-10);
        assert!(cql.penalty >= 0.0);
    }

    #[test]
    fn lagrange_multiplier_rules() {
        let cfg = TrainConfig {
            cql_tau_threshold: 2.0,
            cql_lagrange_lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cql_lagrange_step(2.0, 0.7, &cfg), 0.7);
        assert!(cql_lagrange_step(3.0, 0.7, &cfg) > 0.7);
        assert_eq!(cql_lagrange_step(1.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn zero_alpha_actor_loss_is_bc() {
        let (data, bundle, mut cfg) = setup(Algorithm::Td3bc);
        cfg.td3bc_alpha = 0.0;
        let batch = data.gather(&[0, 2, 4, 6, 8, 10]);
        let critic1 = &bundle.critics.as_ref().unwrap().critic1;
        let td3bc = td3bc_actor_loss(&batch, &bundle.actor, critic1, &cfg).unwrap();
        let bc = bc_loss(&batch, &bundle.actor, &cfg).unwrap();
        assert!((td3bc.loss - bc.loss).abs() < 1e-12);
        assert!(td3bc.grads.max_abs_diff(&bc.grads) < 1e-10);
    }

    #[test]
    fn constant_critic_leaves_only_bc_gradient() {
        let (data, bundle, cfg) = setup(Algorithm::Td3bc);
        let mut critic = Mlp::zeros(&cfg.critic_dims(), OutputActivation::Identity).unwrap();
        critic.layers_mut().last_mut().unwrap().biases[0] = -4.0;
        let batch = data.gather(&[1, 3, 5]);
        let td3bc = td3bc_actor_loss(&batch, &bundle.actor, &critic, &cfg).unwrap();
        let bc = bc_loss(&batch, &bundle.actor, &cfg).unwrap();
        assert!(td3bc.grads.max_abs_diff(&bc.grads) < 1e-12);
        assert!((td3bc.q_mean + 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_imitation_has_zero_bc_term() {
        let (data, bundle, cfg) = setup(Algorithm::Td3bc);
        let mut batch = data.gather(&[0, 1, 2]);
        let (_, pi) = actor_forward(&bundle.actor, &batch.states, cfg.action_bound).unwrap();
        batch.actions = pi;
        let critic1 = &bundle.critics.as_ref().unwrap().critic1;
        let l = td3bc_actor_loss(&batch, &bundle.actor, critic1, &cfg).unwrap();
        assert_eq!(l.bc, 0.0);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        // d/dθ of −mean min(Q1,Q2)(s, π_θ(s)) against central differences
        let (data, bundle, cfg) = setup(Algorithm::Cql);
        let critics = bundle.critics.as_ref().unwrap();
        let batch = data.gather(&[2, 4, 6]);
        let lg = min_q_actor_loss(
            &batch,
            &bundle.actor,
            &critics.critic1,
            &critics.critic2,
            &cfg,
        )
        .unwrap();
        let analytic = lg.grads.flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in [0usize, 17, 100, analytic.len() - 1] {
            let mut plus = bundle.actor.clone();
            let mut minus = bundle.actor.clone();
            bump(&mut plus, idx, h);
            bump(&mut minus, idx, -h);
            let lp = min_q_actor_loss(&batch, &plus, &critics.critic1, &critics.critic2, &cfg)
                .unwrap()
                .loss;
            let lm = min_q_actor_loss(&batch, &minus, &critics.critic1, &critics.critic2, &cfg)
                .unwrap()
                .loss;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(crate::neuralnet::relative_error(analytic[idx], numeric));
        }
        assert!(worst < 1e-5, "{worst}");
    }

    fn bump(net: &mut Mlp, mut idx: usize, h: f64) {
        for layer in net.layers_mut() {
            if idx < layer.weights.len() {
                layer.weights[idx] += h;
                return;
            }
            idx -= layer.weights.len();
            if idx < layer.biases.len() {
                layer.biases[idx] += h;
                return;
            }
            idx -= layer.biases.len();
        }
    }

    #[test]
    fn actor_update_cadence() {
        let ds = toy_dataset(30);
        let stats = NormStats::fit(&ds).unwrap();
        let cfg = tiny_cfg(Algorithm::Td3bc);
        let (_, log) = train_td3bc(&ds, &stats, &cfg).unwrap();
        assert_eq!(log.records.len(), 10);
        assert_eq!(log.actor_updates(), 5);
        let cfg3 = TrainConfig {
            steps: 11,
            policy_delay: 3,
            ..cfg
        };
        let (_, log) = train_td3bc(&ds, &stats, &cfg3).unwrap();
        assert_eq!(log.actor_updates(), 3);
    }

    #[test]
    fn trainers_are_deterministic() {
        let ds = toy_dataset(30);
        let stats = NormStats::fit(&ds).unwrap();
        for algo in [Algorithm::Bc, Algorithm::Cql, Algorithm::Td3bc] {
            let cfg = tiny_cfg(algo);
            let (a, la) = train(&ds, &stats, &cfg).unwrap();
            let (b, lb) = train(&ds, &stats, &cfg).unwrap();
            assert_eq!(a, b, "{algo}");
            assert_eq!(la, lb);
            assert_eq!(
                Checkpoint::new(a).to_json().unwrap(),
                Checkpoint::new(b).to_json().unwrap()
            );
        }
    }

    #[test]
    fn cql_smoke_on_three_transitions() {
        let ds = toy_dataset(3);
        let stats = NormStats::fit(&ds).unwrap();
        let cfg = TrainConfig {
            steps: 100,
            cql_lagrange: true,
            ..tiny_cfg(Algorithm::Cql)
        };
        let (bundle, log) = train_cql(&ds, &stats, &cfg).unwrap();
        assert_eq!(log.records.len(), 100);
        for r in &log.records {
            assert!(r.actor_loss.unwrap().is_finite());
            assert!(r.critic_loss.unwrap().is_finite());
            assert!(r.cql_penalty.unwrap() >= 0.0);
            assert!(r.lagrange_multiplier.unwrap() >= 0.0);
        }
        assert!(bundle.actor.is_finite());
    }

    #[test]
    fn wrong_algorithm_is_rejected() {
        let ds = toy_dataset(5);
        let stats = NormStats::fit(&ds).unwrap();
        assert!(matches!(
            train_bc(&ds, &stats, &tiny_cfg(Algorithm::Cql)),
            Err(AgentError::WrongAlgorithm { .. })
        ));
    }

    #[test]
    fn zero_actor_acts_at_action_mean() {
        let ds = toy_dataset(30);
        let stats = NormStats::fit(&ds).unwrap();
        let cfg = tiny_cfg(Algorithm::Bc);
        let mut bundle = PolicyBundle::init(&cfg, stats.clone()).unwrap();
        bundle.actor = Mlp::zeros(&cfg.actor_dims(), OutputActivation::Tanh).unwrap();
        let a = bundle.act(&ds.transitions[4].state).unwrap();
        assert!((a.delta_liquidity_rate - stats.action.mean[0]).abs() < 1e-18);
        assert!((a.delta_borrow_rate - stats.action.mean[1]).abs() < 1e-18);
    }

    #[test]
    fn actions_respect_bound_and_repeat() {
        let ds = toy_dataset(30);
        let stats = NormStats::fit(&ds).unwrap();
        let cfg = tiny_cfg(Algorithm::Bc);
        let mut bundle = PolicyBundle::init(&cfg, stats).unwrap();
        for layer in bundle.actor.layers_mut() {
            for w in &mut layer.weights {
                *w *= 50.0;
            }
        }
        for t in &ds.transitions {
            let z = bundle.act_normalized(&t.state).unwrap();
            assert!(z.iter().all(|v| v.abs() <= cfg.action_bound));
            assert_eq!(bundle.act(&t.state).unwrap(), bundle.act(&t.state).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint() {
        let ds = toy_dataset(10);
        let stats = NormStats::fit(&ds).unwrap();
        let (bundle, _) = train(&ds, &stats, &tiny_cfg(Algorithm::Td3bc)).unwrap();
        let ckpt = Checkpoint::new(bundle);
        let bytes = ckpt.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&bytes).unwrap(), ckpt);
        let mut tampered = ckpt.clone();
        tampered.norm_stats_fingerprint = "0".repeat(16);
        let bytes = tampered.to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&bytes),
            Err(AgentError::FingerprintMismatch)
        ));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_csv_has_empty_cells_for_missing_values() {
        let log = TrainLog {
            records: vec![TrainRecord {
                step: 0,
                actor_loss: None,
                critic_loss: Some(0.5),
                cql_penalty: None,
                lagrange_multiplier: None,
            }],
        };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "step,actor_loss,critic_loss,penalty,multiplier\n0,,0.5,,\n"
        );
    }
}
