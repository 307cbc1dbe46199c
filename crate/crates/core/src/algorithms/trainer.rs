//! The environment loop around an [`Agent`].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{Env, StepResult};
use crate::replay::{EpisodeOutcome, RatioAdmissionPolicy, ReplayBuffer, Transition};

use super::agent::{Agent, Phase, UpdateReport};
use super::AlgoError;

/// Raw reward that marks a fall in the walker environments.
pub const FALL_REWARD: f64 = -100.0;

/// Hardcore reward shaping: a fall penalty of exactly −100 becomes −5 and
/// every other reward is multiplied by 5. The identity when disabled.
pub fn apply_hardcore_shaping(result: &StepResult, enabled: bool) -> StepResult {
    let mut out = result.clone();
    if enabled {
        out.reward = if result.reward == FALL_REWARD {
            -5.0
        } else {
            5.0 * result.reward
        };
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainerOptions {
    /// Reward shaping for the hardcore walker.
    pub hardcore_shaping: bool,
    /// Hold each episode back and admit failed and successful episodes to
    /// the buffer at a 5:1 ratio.
    pub ratio_admission: bool,
}

/// Per-step record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Environment steps taken so far, this one included.
    pub step: u64,
    /// Index of the episode this step belongs to.
    pub episode: u64,
    /// Set on the last step of an episode: the return the weight sees
    /// (shaped when shaping is on).
    pub episode_return: Option<f64>,
    /// Set on the last step of an episode: the unshaped return.
    pub raw_episode_return: Option<f64>,
    pub fell_down: Option<bool>,
    pub update: UpdateReport,
    /// Forecast weight after this step, before gating.
    pub weight: f64,
    /// Gate state after this step, for forward-looking variants.
    pub gate_open: Option<bool>,
}

pub struct Trainer {
    agent: Agent,
    env: Box<dyn Env>,
    buffer: ReplayBuffer,
    options: TrainerOptions,
    admission: Option<RatioAdmissionPolicy>,
    episode_seeds: ChaCha8Rng,
    state: Option<Vec<f64>>,
    pending: Vec<Transition>,
    steps: u64,
    episode: u64,
    episode_return: f64,
    raw_episode_return: f64,
}

impl Trainer {
    /// `seed` drives the episode reset seeds; the agent carries its own
    /// streams.
    pub fn new(agent: Agent, env: Box<dyn Env>, options: TrainerOptions, seed: u64) -> Result<Self, AlgoError> {
        let spec = env.spec();
        if spec.obs_dim != agent.obs_dim() || spec.act_dim != agent.act_dim() {
            return Err(AlgoError::Usage(format!(
                "agent built for {}x{} but env {} is {}x{}",
                agent.obs_dim(),
                agent.act_dim(),
                env.name(),
                spec.obs_dim,
                spec.act_dim
            )));
        }
        let buffer = ReplayBuffer::new(agent.config().buffer_capacity, spec.obs_dim, spec.act_dim)?;
        let mut episode_seeds = ChaCha8Rng::seed_from_u64(seed);
        episode_seeds.set_stream(5);
        Ok(Self {
            admission: options.ratio_admission.then(RatioAdmissionPolicy::default),
            agent,
            env,
            buffer,
            options,
            episode_seeds,
            state: None,
            pending: Vec::new(),
            steps: 0,
            episode: 0,
            episode_return: 0.0,
            raw_episode_return: 0.0,
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut Agent {
        &mut self.agent
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn episodes_finished(&self) -> u64 {
        self.episode
    }

    pub fn admission(&self) -> Option<&RatioAdmissionPolicy> {
        self.admission.as_ref()
    }

    pub fn into_parts(self) -> (Agent, ReplayBuffer) {
        (self.agent, self.buffer)
    }

    /// One environment step followed by one training iteration.
    pub fn train_iteration(&mut self) -> Result<StepMetrics, AlgoError> {
        let state = match self.state.take() {
            Some(s) => s,
            None => {
                let seed = self.episode_seeds.next_u64();
                let s = self.env.reset(seed)?;
                self.agent.observe_state(&s);
                self.episode_return = 0.0;
                self.raw_episode_return = 0.0;
                s
            }
        };
        let exploration = self.agent.config().exploration_steps as u64;
        let phase = if self.steps < exploration { Phase::Warmup } else { Phase::Train };
        let action = self.agent.select_action(&state, phase)?;
        let raw = self.env.step(&action)?;
        let shaped = apply_hardcore_shaping(&raw, self.options.hardcore_shaping);
        self.agent.observe_state(&shaped.next_state);
        let transition = Transition {
            state,
            action,
            reward: shaped.reward,
            next_state: shaped.next_state.clone(),
            done: shaped.done,
            done_is_timeout: shaped.done_is_timeout,
        };
        if self.admission.is_some() {
            self.pending.push(transition);
        } else {
            self.buffer.push(transition)?;
        }
        self.episode_return += shaped.reward;
        self.raw_episode_return += raw.reward;
        self.steps += 1;

        let update = self.agent.update(&self.buffer, self.steps > exploration)?;

        let mut metrics = StepMetrics {
            step: self.steps,
            episode: self.episode,
            episode_return: None,
            raw_episode_return: None,
            fell_down: None,
            update,
            weight: 0.0,
            gate_open: None,
        };
        if shaped.done {
            let fell = shaped.fell_down();
            self.agent.record_episode(self.episode_return);
            if let Some(policy) = &mut self.admission {
                let outcome = if fell { EpisodeOutcome::Failed } else { EpisodeOutcome::Success };
                policy.admit_episode(&mut self.buffer, std::mem::take(&mut self.pending), outcome)?;
            }
            metrics.episode_return = Some(self.episode_return);
            metrics.raw_episode_return = Some(self.raw_episode_return);
            metrics.fell_down = Some(fell);
            self.episode += 1;
        } else {
            self.state = Some(shaped.next_state);
        }
        metrics.weight = self.agent.current_weight();
        metrics.gate_open = self.agent.variant().is_forward_looking().then(|| self.agent.gate_open());
        Ok(metrics)
    }
}
