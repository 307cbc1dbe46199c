//! Training algorithms: DDPG, TD3 and the forward-looking variants, with
//! the adaptive weight and the system-loss gate.

mod agent;
mod trainer;
mod update;
mod weight;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::NnError;
use crate::envs::EnvError;
use crate::networks::{NetError, RewardInput};
use crate::replay::ReplayError;

pub use agent::{Agent, AgentSnapshot, Checkpoint, Phase, UpdateReport};
pub use trainer::{apply_hardcore_shaping, StepMetrics, Trainer, TrainerOptions};
pub use update::{
    actor_loss, critic_update, fork_rollout, ActorLoss, ActorLossInputs, ActorLossTerms, CriticReport,
};
pub use weight::{adaptive_weight, threshold_gate, AdaptiveWeightState, WeightAveraging};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<NnError> for AlgoError {
    fn from(e: NnError) -> Self {
        AlgoError::Net(NetError::Nn(e))
    }
}

/// Algorithm selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ddpg,
    /// DDPG with the unweighted two-step forecast terms.
    DdpgFork,
    Td3,
    /// TD3 with reward, discounted reward and two-step value forecasts
    /// under the adaptive weight.
    Td3Fork,
    /// `Td3Fork` with a constant weight.
    Td3ForkF,
    /// One-step forecast: reward plus next-state value.
    ForkS,
    /// Next-state value only.
    ForkQ,
    /// Next-state value minus `w′` times the two-step value.
    ForkDq,
    /// `Td3Fork`-shaped loss on buffered consecutive states instead of
    /// forecasts.
    Td3Mt,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Ddpg,
        Variant::DdpgFork,
        Variant::Td3,
        Variant::Td3Fork,
        Variant::Td3ForkF,
        Variant::ForkS,
        Variant::ForkQ,
        Variant::ForkDq,
        Variant::Td3Mt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ddpg => "ddpg",
            Variant::DdpgFork => "ddpg_fork",
            Variant::Td3 => "td3",
            Variant::Td3Fork => "td3_fork",
            Variant::Td3ForkF => "td3_fork_f",
            Variant::ForkS => "fork_s",
            Variant::ForkQ => "fork_q",
            Variant::ForkDq => "fork_dq",
            Variant::Td3Mt => "td3_mt",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        let norm = name.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|v| v.name() == norm)
    }

    /// Twin critics, target smoothing and delayed actor updates.
    pub fn is_td3_family(self) -> bool {
        !matches!(self, Variant::Ddpg | Variant::DdpgFork)
    }

    /// Adds forecast terms to the actor loss.
    pub fn is_forward_looking(self) -> bool {
        !matches!(self, Variant::Ddpg | Variant::Td3)
    }

    /// Needs the system network for rollouts.
    pub fn uses_system(self) -> bool {
        self.is_forward_looking() && self != Variant::Td3Mt
    }

    /// Needs the reward network in the actor loss.
    pub fn uses_reward(self) -> bool {
        matches!(
            self,
            Variant::DdpgFork | Variant::Td3Fork | Variant::Td3ForkF | Variant::ForkS | Variant::Td3Mt
        )
    }

    /// Weight driven by the running episode return.
    pub fn uses_adaptive_weight(self) -> bool {
        matches!(
            self,
            Variant::Td3Fork | Variant::ForkS | Variant::ForkQ | Variant::ForkDq | Variant::Td3Mt
        )
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every algorithm hyperparameter. Noise scales are fractions of the
/// action bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub system_lr: f64,
    pub reward_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub system_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub reward_input: RewardInput,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    /// Uniform random actions for this many environment steps; critic and
    /// actor training starts afterwards.
    pub exploration_steps: usize,
    pub base_weight: f64,
    pub base_reward: f64,
    pub system_threshold: f64,
    /// `w′` of the value-difference variant; `None` picks 0.5 for
    /// `fork_dq` and 0 for `fork_q`.
    pub dq_weight: Option<f64>,
    pub fixed_weight: f64,
    pub weight_averaging: WeightAveraging,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Td3Fork,
            gamma: 0.99,
            tau: 5e-3,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            system_lr: 3e-4,
            reward_lr: 3e-4,
            batch_size: 100,
            buffer_capacity: crate::replay::DEFAULT_CAPACITY,
            hidden: vec![256, 256],
            system_hidden: vec![400, 300],
            reward_hidden: vec![256, 256],
            reward_input: RewardInput::StateActionNext,
            exploration_noise: 0.1,
            target_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            exploration_steps: 10_000,
            base_weight: 0.6,
            base_reward: 320.0,
            system_threshold: 0.01,
            dq_weight: None,
            fixed_weight: 0.4,
            weight_averaging: WeightAveraging::RunningMean,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |m: &str| Err(AlgoError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        for (name, lr) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("system_lr", self.system_lr),
            ("reward_lr", self.reward_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(AlgoError::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be positive");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be at least 1");
        }
        for (name, v) in [
            ("exploration_noise", self.exploration_noise),
            ("target_noise", self.target_noise),
            ("noise_clip", self.noise_clip),
            ("base_weight", self.base_weight),
            ("fixed_weight", self.fixed_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AlgoError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.variant.uses_adaptive_weight() && !(self.base_reward > 0.0) {
            return bad("base_reward must be positive");
        }
        if self.variant.is_forward_looking() && !(self.system_threshold > 0.0) {
            return bad("system_threshold must be positive");
        }
        if let Some(w) = self.dq_weight {
            if !w.is_finite() {
                return bad("dq_weight must be finite");
            }
        }
        if let WeightAveraging::Exponential { alpha } = self.weight_averaging {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return bad("exponential averaging needs alpha in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn effective_dq_weight(&self) -> f64 {
        match (self.dq_weight, self.variant) {
            (Some(w), _) => w,
            (None, Variant::ForkDq) => 0.5,
            _ => 0.0,
        }
    }

    /// Deterministic fingerprint of the configuration.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
