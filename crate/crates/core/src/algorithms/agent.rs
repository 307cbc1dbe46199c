//! The agent: networks, optimizers, random streams and update counters.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Matrix};
use crate::envs::EnvSpec;
use crate::networks::{
    train_reward, train_system, ActorNet, CriticPair, ObsBounds, RewardNet, SystemNet, TargetSet,
};
use crate::replay::ReplayBuffer;

use super::update::{actor_loss, critic_update, fork_rollout, ActorLossInputs};
use super::weight::{threshold_gate, AdaptiveWeightState};
use super::{fnv1a, AgentConfig, AlgoError, Variant};

/// How an action is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Uniform over the action box.
    Warmup,
    /// Policy plus Gaussian exploration noise, clipped.
    Train,
    /// Policy output, no noise.
    Eval,
}

/// Independent random streams, so that consuming randomness in one place
/// never shifts another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Streams {
    explore: ChaCha8Rng,
    sample: ChaCha8Rng,
    target_noise: ChaCha8Rng,
    sequence: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            explore: stream(1),
            sample: stream(2),
            target_noise: stream(3),
            sequence: stream(4),
        }
    }
}

/// What one call to [`Agent::update`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: Option<f64>,
    pub system_loss: Option<f64>,
    pub reward_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub actor_updated: bool,
    /// Gate state at the actor update, for variants that have one.
    pub gate_open: Option<bool>,
    /// Forecast terms contributed to this actor update.
    pub forward_looking: bool,
    /// Weight in effect at the actor update.
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    config: AgentConfig,
    obs_dim: usize,
    act_dim: usize,
    action_bound: f64,
    pub actor: ActorNet,
    pub critics: CriticPair,
    pub system: SystemNet,
    pub reward: RewardNet,
    pub targets: TargetSet,
    actor_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    system_opt: AdamState,
    reward_opt: AdamState,
    weight: AdaptiveWeightState,
    bounds: ObsBounds,
    streams: Streams,
    critic_updates: u64,
    actor_updates: u64,
    model_updates: u64,
    last_system_loss: f64,
}

impl Agent {
    /// Builds every network from `seed`. Actor and critics are drawn first,
    /// so their initial values do not depend on the variant.
    pub fn new(config: AgentConfig, spec: &EnvSpec, seed: u64) -> Result<Self, AlgoError> {
        config.validate()?;
        spec.validate()?;
        let action_bound = spec.symmetric_action_bound().ok_or_else(|| {
            AlgoError::Config("the actor needs symmetric action bounds equal in every dimension".into())
        })?;
        let (o, a) = (spec.obs_dim, spec.act_dim);
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let actor = ActorNet::new(o, a, &config.hidden, action_bound, &mut init)?;
        let critics = CriticPair::new(o, a, &config.hidden, &mut init)?;
        let system = SystemNet::new(o, a, &config.system_hidden, &mut init)?;
        let reward = RewardNet::new(o, a, &config.reward_hidden, config.reward_input, &mut init)?;
        let targets = TargetSet::from_online(&actor, &critics);
        let opt = |m, lr| AdamState::new(m, AdamConfig::with_learning_rate(lr));
        Ok(Self {
            actor_opt: opt(&actor.params, config.actor_lr),
            q1_opt: opt(&critics.q1, config.critic_lr),
            q2_opt: opt(&critics.q2, config.critic_lr),
            system_opt: opt(&system.params, config.system_lr),
            reward_opt: opt(&reward.params, config.reward_lr),
            weight: AdaptiveWeightState::new(config.base_weight, config.base_reward, config.weight_averaging),
            bounds: ObsBounds::from_spec(spec.obs_low.as_deref(), spec.obs_high.as_deref(), o),
            streams: Streams::new(seed),
            obs_dim: o,
            act_dim: a,
            action_bound,
            actor,
            critics,
            system,
            reward,
            targets,
            config,
            critic_updates: 0,
            actor_updates: 0,
            model_updates: 0,
            last_system_loss: f64::NAN,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    pub fn model_updates(&self) -> u64 {
        self.model_updates
    }

    /// Latest system-network training loss; NaN before the first update.
    pub fn last_system_loss(&self) -> f64 {
        self.last_system_loss
    }

    pub fn weight_state(&self) -> &AdaptiveWeightState {
        &self.weight
    }

    pub fn bounds(&self) -> &ObsBounds {
        &self.bounds
    }

    /// Weight on the forecast terms, before gating.
    pub fn current_weight(&self) -> f64 {
        match self.config.variant {
            Variant::Ddpg | Variant::Td3 => 0.0,
            Variant::DdpgFork => 1.0,
            Variant::Td3ForkF => self.config.fixed_weight,
            _ => self.weight.weight(),
        }
    }

    /// Whether the forecast terms would be used right now.
    pub fn gate_open(&self) -> bool {
        threshold_gate(self.last_system_loss, self.config.system_threshold)
    }

    /// Tracks the extents of observed states for forecast clipping.
    pub fn observe_state(&mut self, state: &[f64]) {
        self.bounds.observe(state);
    }

    pub fn record_episode(&mut self, episode_return: f64) -> f64 {
        self.weight.record_episode(episode_return)
    }

    pub fn select_action(&mut self, state: &[f64], phase: Phase) -> Result<Vec<f64>, AlgoError> {
        let b = self.action_bound;
        match phase {
            Phase::Warmup => Ok((0..self.act_dim).map(|_| self.streams.explore.gen_range(-b..=b)).collect()),
            Phase::Eval => Ok(self.actor.act_vec(state)?),
            Phase::Train => {
                let mut a = self.actor.act_vec(state)?;
                let sigma = self.config.exploration_noise * b;
                if sigma > 0.0 {
                    let noise = Normal::new(0.0, sigma).expect("finite sigma");
                    for v in &mut a {
                        *v = (*v + noise.sample(&mut self.streams.explore)).clamp(-b, b);
                    }
                }
                Ok(a)
            }
        }
    }

    /// One training iteration on a uniform minibatch: critic regression
    /// (when `train_policy`), system and reward regression (forward-looking
    /// variants), then the delayed actor and target update.
    pub fn update(&mut self, buffer: &ReplayBuffer, train_policy: bool) -> Result<UpdateReport, AlgoError> {
        let mut report = UpdateReport::default();
        let n = self.config.batch_size;
        if buffer.len() < n {
            return Ok(report);
        }
        let variant = self.config.variant;
        let batch = buffer.sample_uniform(n, &mut self.streams.sample)?;
        let td3 = variant.is_td3_family();

        if train_policy {
            let noise = if td3 {
                Some(self.target_noise_matrix(n)?)
            } else {
                None
            };
            let q2 = td3.then_some(&mut self.q2_opt);
            let rep = critic_update(
                &mut self.critics,
                &mut self.q1_opt,
                q2,
                &self.targets,
                &batch,
                self.config.gamma,
                self.action_bound,
                noise.as_ref(),
            )?;
            self.critic_updates += 1;
            report.critic_loss = Some(rep.loss);
        }

        if variant.is_forward_looking() {
            let sl = train_system(&mut self.system, &mut self.system_opt, &batch.states, &batch.actions, &batch.next_states)?;
            let rl = train_reward(
                &mut self.reward,
                &mut self.reward_opt,
                &batch.states,
                &batch.actions,
                &batch.next_states,
                &batch.rewards,
            )?;
            self.model_updates += 1;
            self.last_system_loss = sl;
            report.system_loss = Some(sl);
            report.reward_loss = Some(rl);
        }

        let delay = if td3 { self.config.policy_delay as u64 } else { 1 };
        if !train_policy || self.critic_updates % delay != 0 {
            return Ok(report);
        }

        let weight = self.current_weight();
        let gate = variant.is_forward_looking().then(|| self.gate_open());
        let use_fork = gate == Some(true) && weight != 0.0;
        let (states, future) = if !use_fork {
            (batch.states, None)
        } else if variant == Variant::Td3Mt {
            let seq = buffer.sample_consecutive(n, 3, &mut self.streams.sequence)?;
            let mut steps = seq.steps.into_iter();
            let s0 = steps.next().expect("three steps").states;
            let s1 = steps.next().expect("three steps").states;
            let s2 = steps.next().expect("three steps").states;
            (s0, Some((s1, s2)))
        } else {
            let fut = fork_rollout(&self.system, &self.actor, &batch.states, &self.bounds)?;
            (batch.states, Some(fut))
        };
        let loss = actor_loss(ActorLossInputs {
            variant,
            actor: &self.actor,
            critics: &self.critics,
            reward: &self.reward,
            states: &states,
            future: future.as_ref().map(|(a, b)| (a, b)),
            weight,
            gamma: self.config.gamma,
            dq_weight: self.config.effective_dq_weight(),
        })?;
        self.actor_opt.step(&mut self.actor.params, &loss.grads)?;
        self.targets.soft_update(&self.actor, &self.critics, self.config.tau)?;
        self.actor_updates += 1;
        report.actor_updated = true;
        report.actor_loss = Some(loss.loss);
        report.gate_open = gate;
        report.forward_looking = loss.forward_looking;
        report.weight = Some(if use_fork { weight } else { 0.0 });
        Ok(report)
    }

    /// `clip(N(0, σ̃·bound), ±c·bound)` per action component.
    fn target_noise_matrix(&mut self, n: usize) -> Result<Matrix, AlgoError> {
        let b = self.action_bound;
        let sigma = self.config.target_noise * b;
        let clip = self.config.noise_clip * b;
        let mut values = vec![0.0; n * self.act_dim];
        if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma).expect("finite sigma");
            for v in &mut values {
                *v = dist.sample(&mut self.streams.target_noise).clamp(-clip, clip);
            }
        }
        Ok(Matrix::new(n, self.act_dim, values)?)
    }

    /// Fingerprint of the actor and both critics, bit for bit.
    pub fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for net in [&self.actor.params, &self.critics.q1, &self.critics.q2] {
            for v in net.flat_params() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

/// Current on-disk checkpoint layout version.
const CHECKPOINT_FORMAT: u32 = 1;

/// Everything needed to resume training bit-exactly: the agent (networks,
/// targets, optimizer moments, weight state, random streams, counters) and
/// optionally the replay buffer, tagged with the configuration fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: u32,
    config_hash: u64,
    pub agent: Agent,
    pub buffer: Option<ReplayBuffer>,
}

/// The part of a checkpoint needed to act: the agent alone.
pub type AgentSnapshot = Agent;

impl Checkpoint {
    pub fn new(agent: Agent, buffer: Option<ReplayBuffer>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            config_hash: agent.config.fingerprint(),
            agent,
            buffer,
        }
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AlgoError> {
        bincode::serialize(self).map_err(|e| AlgoError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AlgoError> {
        let ck: Checkpoint = bincode::deserialize(bytes).map_err(|e| AlgoError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(AlgoError::Checkpoint(format!("unsupported format {}", ck.format)));
        }
        if ck.config_hash != ck.agent.config.fingerprint() {
            return Err(AlgoError::Checkpoint("configuration fingerprint mismatch".into()));
        }
        Ok(ck)
    }

    /// Rejects a checkpoint written under a different configuration.
    pub fn ensure_config(&self, expected: &AgentConfig) -> Result<(), AlgoError> {
        if self.config_hash != expected.fingerprint() {
            return Err(AlgoError::Checkpoint("checkpoint was written under another configuration".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AlgoError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AlgoError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AlgoError> {
        let bytes = std::fs::read(path).map_err(|e| AlgoError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, LqrEnv, LqrEnvParams};
    use crate::replay::Transition;

    fn small_config(variant: Variant) -> AgentConfig {
        AgentConfig {
            variant,
            hidden: vec![16, 16],
            system_hidden: vec![16, 16],
            reward_hidden: vec![16, 16],
            batch_size: 16,
            exploration_steps: 0,
            base_reward: 10.0,
            system_threshold: 1e9,
            ..AgentConfig::default()
        }
    }

    fn lqr_spec() -> EnvSpec {
        LqrEnv::new(LqrEnvParams::default()).unwrap().spec().clone()
    }

    fn filled_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut env = LqrEnv::new(LqrEnvParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(10_000, 2, 2).unwrap();
        let mut s = env.reset(seed).unwrap();
        for ep in 0..n {
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let r = env.step(&a).unwrap();
            buf.push(Transition {
                state: s.clone(),
                action: a,
                reward: r.reward,
                next_state: r.next_state.clone(),
                done: r.done,
                done_is_timeout: r.done_is_timeout,
            })
            .unwrap();
            s = if r.done { env.reset(seed + ep as u64).unwrap() } else { r.next_state };
        }
        buf
    }

    #[test]
    fn eval_action_equals_noise_free_train_action() {
        let cfg = AgentConfig {
            exploration_noise: 0.0,
            ..small_config(Variant::Td3)
        };
        let mut agent = Agent::new(cfg, &lqr_spec(), 3).unwrap();
        let s = [0.3, -0.7];
        assert_eq!(agent.select_action(&s, Phase::Train).unwrap(), agent.select_action(&s, Phase::Eval).unwrap());
    }

    #[test]
    fn warmup_actions_are_uniform_over_bounds() {
        let mut agent = Agent::new(small_config(Variant::Td3), &lqr_spec(), 3).unwrap();
        let b = agent.action_bound();
        let mut xs: Vec<f64> = (0..10_000)
            .map(|_| agent.select_action(&[0.0, 0.0], Phase::Warmup).unwrap()[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov statistic against U(−b, b); 1.63/√n is the 1% level
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cdf = (x + b) / (2.0 * b);
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
        assert!(xs.iter().all(|x| x.abs() <= b));
    }

    #[test]
    fn train_actions_stay_in_bounds() {
        let cfg = AgentConfig {
            exploration_noise: 5.0,
            ..small_config(Variant::Td3)
        };
        let mut agent = Agent::new(cfg, &lqr_spec(), 3).unwrap();
        for k in 0..200 {
            let a = agent.select_action(&[k as f64 * 0.1, -3.0], Phase::Train).unwrap();
            assert!(a.iter().all(|v| v.abs() <= agent.action_bound()));
        }
    }

    #[test]
    fn actor_updates_every_second_critic_update() {
        let buf = filled_buffer(200, 1);
        let mut agent = Agent::new(small_config(Variant::Td3Fork), &lqr_spec(), 4).unwrap();
        let mut last_actor = 0;
        for k in 1..=41u64 {
            let rep = agent.update(&buf, true).unwrap();
            assert_eq!(rep.actor_updated, k % 2 == 0);
            if rep.actor_updated {
                assert_eq!(agent.critic_updates() - last_actor, 2);
                last_actor = agent.critic_updates();
            }
        }
        assert_eq!(agent.actor_updates(), 41 / 2);
        assert_eq!(agent.critic_updates(), 41);
    }

    #[test]
    fn ddpg_updates_actor_every_step() {
        let buf = filled_buffer(100, 2);
        let mut agent = Agent::new(small_config(Variant::Ddpg), &lqr_spec(), 4).unwrap();
        for _ in 0..5 {
            assert!(agent.update(&buf, true).unwrap().actor_updated);
        }
        let q2 = agent.critics.q2.clone();
        assert_eq!(q2, Agent::new(small_config(Variant::Ddpg), &lqr_spec(), 4).unwrap().critics.q2);
    }

    #[test]
    fn small_buffer_or_warmup_skips_policy_training() {
        let buf = filled_buffer(10, 3);
        let mut agent = Agent::new(small_config(Variant::Td3Fork), &lqr_spec(), 4).unwrap();
        assert_eq!(agent.update(&buf, true).unwrap(), UpdateReport::default());
        let buf = filled_buffer(100, 3);
        let rep = agent.update(&buf, false).unwrap();
        assert!(rep.critic_loss.is_none() && rep.system_loss.is_some() && !rep.actor_updated);
    }

    #[test]
    fn plain_variant_never_consults_the_models() {
        let buf = filled_buffer(300, 5);
        let mut a = Agent::new(small_config(Variant::Td3), &lqr_spec(), 9).unwrap();
        let mut b = a.clone();
        // scramble b's system and reward networks: the policy path must not care
        b.system.params.for_each_param_slice_mut(|s| s.iter_mut().for_each(|v| *v = 1e3));
        b.reward.params.for_each_param_slice_mut(|s| s.iter_mut().for_each(|v| *v = -1e3));
        for _ in 0..20 {
            a.update(&buf, true).unwrap();
            b.update(&buf, true).unwrap();
            assert_eq!(a.param_checksum(), b.param_checksum());
        }
    }

    #[test]
    fn zero_base_weight_matches_plain_td3_bitwise() {
        let buf = filled_buffer(300, 6);
        let mut plain = Agent::new(small_config(Variant::Td3), &lqr_spec(), 11).unwrap();
        let mut fork = Agent::new(
            AgentConfig {
                base_weight: 0.0,
                ..small_config(Variant::Td3Fork)
            },
            &lqr_spec(),
            11,
        )
        .unwrap();
        for _ in 0..30 {
            plain.update(&buf, true).unwrap();
            let rep = fork.update(&buf, true).unwrap();
            assert!(!rep.forward_looking);
            assert_eq!(plain.param_checksum(), fork.param_checksum());
        }
    }

    #[test]
    fn open_gate_with_weight_uses_forecasts() {
        let buf = filled_buffer(300, 7);
        for v in [Variant::Td3Fork, Variant::ForkS, Variant::ForkQ, Variant::ForkDq, Variant::Td3ForkF, Variant::DdpgFork, Variant::Td3Mt] {
            let mut agent = Agent::new(small_config(v), &lqr_spec(), 12).unwrap();
            let mut saw = false;
            for _ in 0..4 {
                let rep = agent.update(&buf, true).unwrap();
                if rep.actor_updated {
                    assert_eq!(rep.gate_open, Some(true));
                    assert!(rep.forward_looking, "{v}");
                    saw = true;
                }
            }
            assert!(saw);
        }
    }

    #[test]
    fn closed_gate_falls_back_to_plain_loss() {
        let buf = filled_buffer(300, 8);
        let mut agent = Agent::new(
            AgentConfig {
                system_threshold: 1e-12,
                ..small_config(Variant::Td3Fork)
            },
            &lqr_spec(),
            12,
        )
        .unwrap();
        for _ in 0..4 {
            let rep = agent.update(&buf, true).unwrap();
            if rep.actor_updated {
                assert_eq!(rep.gate_open, Some(false));
                assert!(!rep.forward_looking);
                assert_eq!(rep.weight, Some(0.0));
            }
        }
    }

    #[test]
    fn fixed_weight_variant_ignores_returns() {
        let mut agent = Agent::new(small_config(Variant::Td3ForkF), &lqr_spec(), 1).unwrap();
        for r in [-50.0, 5.0, 100.0, 1e6] {
            agent.record_episode(r);
            assert_eq!(agent.current_weight(), 0.4);
        }
    }

    #[test]
    fn checkpoint_restores_training_bit_exactly() {
        let buf = filled_buffer(300, 9);
        let mut agent = Agent::new(small_config(Variant::Td3Fork), &lqr_spec(), 13).unwrap();
        for _ in 0..7 {
            agent.update(&buf, true).unwrap();
        }
        agent.record_episode(-3.0);
        let bytes = Checkpoint::new(agent.clone(), Some(buf.clone())).to_bytes().unwrap();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        restored.ensure_config(agent.config()).unwrap();
        let mut resumed = restored.agent;
        let rbuf = restored.buffer.unwrap();
        assert_eq!(rbuf, buf);
        for _ in 0..9 {
            let a = agent.update(&buf, true).unwrap();
            let b = resumed.update(&rbuf, true).unwrap();
            assert_eq!(a, b);
            assert_eq!(agent.param_checksum(), resumed.param_checksum());
        }
        assert_eq!(agent.select_action(&[0.1, 0.2], Phase::Train).unwrap(), resumed.select_action(&[0.1, 0.2], Phase::Train).unwrap());
    }

    #[test]
    fn checkpoint_detects_config_mismatch_and_corruption() {
        let agent = Agent::new(small_config(Variant::Td3), &lqr_spec(), 1).unwrap();
        let ck = Checkpoint::new(agent, None);
        assert!(ck.ensure_config(&small_config(Variant::Td3Fork)).is_err());
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn asymmetric_action_bounds_are_rejected() {
        let mut spec = lqr_spec();
        spec.action_low = vec![-1.0, -2.0];
        spec.action_high = vec![1.0, 2.0];
        assert!(matches!(Agent::new(small_config(Variant::Td3), &spec, 0), Err(AlgoError::Config(_))));
    }
}
