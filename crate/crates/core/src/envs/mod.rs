//! Environment abstraction, the built-in continuous-control environments,
//! and the client for environments served over the bridge protocol.

pub mod bridge;
mod lqr;
mod pendulum;
mod point_mass;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bridge::{BridgeEnv, BridgeParams};
pub use lqr::{lqr_oracle, lqr_oracle_with_seeds, rollout_linear_policy, LqrEnv, LqrEnvParams, LqrOracle, ORACLE_EPISODES};
pub use pendulum::{Pendulum, PendulumParams};
pub use point_mass::{PointMass, PointMassParams};

use crate::autodiff::NnError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    EpisodeOver,
    #[error("step called before reset")]
    NotReset,
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("remote environment error: {0}")]
    Remote(String),
    #[error("Riccati recursion did not converge: {0}")]
    NonConvergent(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub obs_low: Option<Vec<f64>>,
    pub obs_high: Option<Vec<f64>>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let check = |what: &'static str, len: usize, expected: usize| {
            if len != expected {
                Err(EnvError::DimensionMismatch {
                    what,
                    expected,
                    got: len,
                })
            } else {
                Ok(())
            }
        };
        check("action_low", self.action_low.len(), self.act_dim)?;
        check("action_high", self.action_high.len(), self.act_dim)?;
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(EnvError::InvalidParams("action_low must be below action_high".into()));
        }
        if let (Some(lo), Some(hi)) = (&self.obs_low, &self.obs_high) {
            check("obs_low", lo.len(), self.obs_dim)?;
            check("obs_high", hi.len(), self.obs_dim)?;
            if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(EnvError::InvalidParams("obs_low must be below obs_high".into()));
            }
        }
        if self.max_episode_steps == 0 {
            return Err(EnvError::InvalidParams("max_episode_steps must be positive".into()));
        }
        Ok(())
    }

    /// Largest action magnitude when the bounds are symmetric and equal in
    /// every dimension.
    pub fn symmetric_action_bound(&self) -> Option<f64> {
        let b = self.action_high.first().copied()?;
        let symmetric = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .all(|(l, h)| *h == b && *l == -b);
        symmetric.then_some(b)
    }

    pub fn clip_action(&self, action: &mut [f64]) -> bool {
        let mut clipped = false;
        for ((a, lo), hi) in action.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            if *a < *lo {
                *a = *lo;
                clipped = true;
            } else if *a > *hi {
                *a = *hi;
                clipped = true;
            }
        }
        clipped
    }
}

/// Tag set on the final step of an episode that ended in failure.
pub const FELL_DOWN: &str = "fell_down";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub done_is_timeout: bool,
    pub info: BTreeMap<String, bool>,
}

impl StepResult {
    pub fn fell_down(&self) -> bool {
        self.info.get(FELL_DOWN).copied().unwrap_or(false)
    }
}

/// A resettable episodic environment. Deterministic given the reset seed and
/// the action sequence.
pub trait Env: Send {
    fn name(&self) -> &str;
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError>;
}

/// Step counter and termination bookkeeping shared by the built-in envs.
#[derive(Clone, Debug, Default)]
pub(crate) struct EpisodeClock {
    steps: usize,
    started: bool,
    finished: bool,
    warned: bool,
}

impl EpisodeClock {
    pub(crate) fn restart(&mut self) {
        *self = Self {
            started: true,
            ..Self::default()
        };
    }

    /// Validates and clips an incoming action.
    pub(crate) fn begin_step(&mut self, spec: &EnvSpec, name: &str, action: &[f64]) -> Result<Vec<f64>, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != spec.act_dim {
            return Err(EnvError::DimensionMismatch {
                what: "action",
                expected: spec.act_dim,
                got: action.len(),
            });
        }
        let mut a = action.to_vec();
        if spec.clip_action(&mut a) && !self.warned {
            tracing::warn!(env = name, ?action, "action outside bounds; clipped");
            self.warned = true;
        }
        Ok(a)
    }

    /// Records the step; returns `(done, done_is_timeout)`.
    pub(crate) fn end_step(&mut self, horizon: usize, terminal: bool) -> (bool, bool) {
        self.steps += 1;
        let timeout = !terminal && self.steps >= horizon;
        let done = terminal || timeout;
        self.finished = done;
        (done, timeout)
    }
}

/// Environment selection as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Lqr(LqrEnvParams),
    Pendulum(PendulumParams),
    PointMass(PointMassParams),
    Bridge(BridgeParams),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Lqr(LqrEnvParams::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Lqr(_) => "lqr",
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::PointMass(_) => "point_mass",
            EnvConfig::Bridge(_) => "bridge",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Env>, EnvError> {
        Ok(match self {
            EnvConfig::Lqr(p) => Box::new(LqrEnv::new(p.clone())?),
            EnvConfig::Pendulum(p) => Box::new(Pendulum::new(p.clone())?),
            EnvConfig::PointMass(p) => Box::new(PointMass::new(p.clone())?),
            EnvConfig::Bridge(p) => Box::new(BridgeEnv::connect_with(p)?),
        })
    }
}
