//! The named networks of a forward-looking agent: actor, twin critics,
//! system (dynamics) network, reward network, and target copies.

mod bounds;


use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{mse, smooth_l1, AdamState, Matrix, Mlp, NnError, OutputActivation};

pub use bounds::ObsBounds;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Deterministic policy `A_φ(s) = bound · tanh(·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorNet {
    pub params: Mlp,
    action_bound: f64,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let dims = layer_dims(obs_dim, hidden, act_dim);
        let params = Mlp::init(&dims, OutputActivation::TanhScaled(action_bound), rng)?;
        Ok(Self {
            params,
            action_bound,
        })
    }

    /// Wraps existing parameters; the output must be `TanhScaled`.
    pub fn from_params(params: Mlp) -> Result<Self, NetError> {
        match params.output_activation() {
            OutputActivation::TanhScaled(action_bound) => Ok(Self {
                params,
                action_bound,
            }),
            OutputActivation::Identity => Err(NetError::InvalidArgument(
                "actor output must be tanh-scaled".into(),
            )),
        }
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn obs_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.params.output_dim()
    }

    pub fn act(&self, states: &Matrix) -> Result<Matrix, NetError> {
        Ok(self.params.predict(states)?)
    }

    pub fn act_vec(&self, state: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.params.predict_vec(state)?)
    }
}

/// Twin critics `Q_ψ1`, `Q_ψ2` over the concatenated input `[s; a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
}

impl CriticPair {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let dims = layer_dims(obs_dim + act_dim, hidden, 1);
        Ok(Self {
            q1: Mlp::init(&dims, OutputActivation::Identity, rng)?,
            q2: Mlp::init(&dims, OutputActivation::Identity, rng)?,
        })
    }
}

/// Critic input `[s; a]`, one row per sample.
pub fn critic_input(states: &Matrix, actions: &Matrix) -> Result<Matrix, NetError> {
    Ok(Matrix::hstack(&[states, actions])?)
}

/// `F_θ(s, a)`: predicts the absolute next state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemNet {
    pub params: Mlp,
}

impl SystemNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let dims = layer_dims(obs_dim + act_dim, hidden, obs_dim);
        Ok(Self {
            params: Mlp::init(&dims, OutputActivation::Identity, rng)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.params.output_dim()
    }

    /// Unclipped prediction.
    pub fn predict(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix, NetError> {
        Ok(self.params.predict(&critic_input(states, actions)?)?)
    }
}

/// Which inputs the reward network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardInput {
    /// `R_η(s, a)`.
    StateAction,
    /// `R_η(s, a, s′)`, the revised form used by default.
    StateActionNext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNet {
    pub params: Mlp,
    input: RewardInput,
    obs_dim: usize,
}

impl RewardNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        input: RewardInput,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let in_dim = match input {
            RewardInput::StateAction => obs_dim + act_dim,
            RewardInput::StateActionNext => 2 * obs_dim + act_dim,
        };
        Ok(Self {
            params: Mlp::init(&layer_dims(in_dim, hidden, 1), OutputActivation::Identity, rng)?,
            input,
            obs_dim,
        })
    }

    pub fn input_kind(&self) -> RewardInput {
        self.input
    }

    /// Assembles the network input; `next_states` is ignored by the
    /// `(s, a)` form.
    pub fn input(
        &self,
        states: &Matrix,
        actions: &Matrix,
        next_states: &Matrix,
    ) -> Result<Matrix, NetError> {
        Ok(match self.input {
            RewardInput::StateAction => Matrix::hstack(&[states, actions])?,
            RewardInput::StateActionNext => Matrix::hstack(&[states, actions, next_states])?,
        })
    }

    /// Column range of the action inside [`RewardNet::input`].
    pub fn action_columns(&self) -> std::ops::Range<usize> {
        let act_dim = self.params.input_dim()
            - match self.input {
                RewardInput::StateAction => self.obs_dim,
                RewardInput::StateActionNext => 2 * self.obs_dim,
            };
        self.obs_dim..self.obs_dim + act_dim
    }

    pub fn predict(
        &self,
        states: &Matrix,
        actions: &Matrix,
        next_states: &Matrix,
    ) -> Result<Vec<f64>, NetError> {
        Ok(self
            .params
            .predict(&self.input(states, actions, next_states)?)?
            .into_vec())
    }
}

/// Slowly tracking copies of the actor and critics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub actor: ActorNet,
    pub critics: CriticPair,
}

impl TargetSet {
    pub fn from_online(actor: &ActorNet, critics: &CriticPair) -> Self {
        Self {
            actor: actor.clone(),
            critics: critics.clone(),
        }
    }

    pub fn soft_update(
        &mut self,
        actor: &ActorNet,
        critics: &CriticPair,
        tau: f64,
    ) -> Result<(), NetError> {
        soft_update(&mut self.actor.params, &actor.params, tau)?;
        soft_update(&mut self.critics.q1, &critics.q1, tau)?;
        soft_update(&mut self.critics.q2, &critics.q2, tau)
    }
}

/// `target ← τ·online + (1 − τ)·target`, parameter by parameter.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NetError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NetError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    if !target.same_shape(online) {
        return Err(NnError::Shape("soft update between differently shaped networks".into()).into());
    }
    let sources: Vec<&[f64]> = online.param_slices().collect();
    let mut idx = 0;
    target.for_each_param_slice_mut(|t| {
        for (tv, ov) in t.iter_mut().zip(sources[idx]) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
        idx += 1;
    });
    Ok(())
}

/// One Adam step of the system network on the smooth-L1 loss between
/// `F_θ(s, a)` and `s′`. Returns the loss before the step.
pub fn train_system(
    net: &mut SystemNet,
    optimizer: &mut AdamState,
    states: &Matrix,
    actions: &Matrix,
    next_states: &Matrix,
) -> Result<f64, NetError> {
    if states.rows() == 0 {
        return Err(NetError::EmptyBatch);
    }
    let input = critic_input(states, actions)?;
    let (pred, cache) = net.params.forward(&input)?;
    let (loss, grad) = smooth_l1(pred.as_slice(), next_states.as_slice())?;
    let upstream = Matrix::new(pred.rows(), pred.cols(), grad)?;
    let grads = net.params.backward(&cache, &upstream)?;
    optimizer.step(&mut net.params, &grads)?;
    Ok(loss)
}

/// One Adam step of the reward network on the MSE between
/// `R_η(s, a, s′)` and `r`. Returns the loss before the step.
pub fn train_reward(
    net: &mut RewardNet,
    optimizer: &mut AdamState,
    states: &Matrix,
    actions: &Matrix,
    next_states: &Matrix,
    rewards: &[f64],
) -> Result<f64, NetError> {
    if states.rows() == 0 {
        return Err(NetError::EmptyBatch);
    }
    let input = net.input(states, actions, next_states)?;
    let (pred, cache) = net.params.forward(&input)?;
    let (loss, grad) = mse(pred.as_slice(), rewards)?;
    let upstream = Matrix::new(pred.rows(), 1, grad)?;
    let grads = net.params.backward(&cache, &upstream)?;
    optimizer.step(&mut net.params, &grads)?;
    Ok(loss)
}

/// `clip(F_θ(s, a), o_min, o_max)` row by row.
pub fn predict_next(
    net: &SystemNet,
    states: &Matrix,
    actions: &Matrix,
    bounds: &ObsBounds,
) -> Result<Matrix, NetError> {
    let mut next = net.predict(states, actions)?;
    for r in 0..next.rows() {
        bounds.clip(next.row_mut(r));
    }
    Ok(next)
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn soft_update_extremes() {
        let mut r = rng(0);
        let online = Mlp::init(&[3, 4, 2], OutputActivation::Identity, &mut r).unwrap();
        let original = Mlp::init(&[3, 4, 2], OutputActivation::Identity, &mut r).unwrap();
        let mut t = original.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, original);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        assert!(soft_update(&mut t, &online, 1.5).is_err());
        let other = Mlp::init(&[3, 5, 2], OutputActivation::Identity, &mut r).unwrap();
        assert!(soft_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn repeated_soft_updates_follow_geometric_closed_form() {
        let mut r = rng(1);
        let online = Mlp::init(&[2, 6, 1], OutputActivation::Identity, &mut r).unwrap();
        let start = Mlp::init(&[2, 6, 1], OutputActivation::Identity, &mut r).unwrap();
        let tau = 0.005;
        let n = 400;
        let mut target = start.clone();
        for _ in 0..n {
            soft_update(&mut target, &online, tau).unwrap();
        }
        let decay = (1.0 - tau).powi(n);
        for ((t, t0), p) in target
            .flat_params()
            .iter()
            .zip(start.flat_params())
            .zip(online.flat_params())
        {
            let expected = decay * t0 + (1.0 - decay) * p;
            assert!((t - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn system_loss_matches_independent_recomputation() {
        let mut r = rng(2);
        let mut net = SystemNet::new(2, 1, &[8, 8], &mut r).unwrap();
        let states = Matrix::new(3, 2, vec![0.1, 0.2, -0.5, 1.0, 2.0, -2.0]).unwrap();
        let actions = Matrix::new(3, 1, vec![0.3, -0.1, 1.0]).unwrap();
        let next = Matrix::new(3, 2, vec![0.0, 0.5, 3.0, -1.0, 0.2, 0.2]).unwrap();
        let pred = net.predict(&states, &actions).unwrap();
        let mut oracle = 0.0;
        for (p, t) in pred.as_slice().iter().zip(next.as_slice()) {
            let d: f64 = p - t;
            oracle += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        oracle /= 6.0;
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        let loss = train_system(&mut net, &mut opt, &states, &actions, &next).unwrap();
        assert!((loss - oracle).abs() < 1e-14);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn perfect_predictions_leave_parameters_alone() {
        let mut r = rng(3);
        let mut net = SystemNet::new(2, 1, &[4, 4], &mut r).unwrap();
        let states = Matrix::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let actions = Matrix::new(2, 1, vec![0.5, -0.5]).unwrap();
        let next = net.predict(&states, &actions).unwrap();
        let before = net.params.flat_params();
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        let loss = train_system(&mut net, &mut opt, &states, &actions, &next).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params.flat_params(), before);

        let mut reward = RewardNet::new(2, 1, &[4, 4], RewardInput::StateActionNext, &mut r).unwrap();
        let rewards = reward.predict(&states, &actions, &next).unwrap();
        let before = reward.params.flat_params();
        let mut ropt = AdamState::new(&reward.params, AdamConfig::default());
        let loss = train_reward(&mut reward, &mut ropt, &states, &actions, &next, &rewards).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(reward.params.flat_params(), before);
    }

    #[test]
    fn reward_loss_matches_independent_mse() {
        let mut r = rng(4);
        let mut net = RewardNet::new(2, 1, &[8, 8], RewardInput::StateActionNext, &mut r).unwrap();
        let states = Matrix::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let actions = Matrix::new(2, 1, vec![0.5, -0.5]).unwrap();
        let next = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rewards = [1.0, -2.0];
        let pred = net.predict(&states, &actions, &next).unwrap();
        let oracle = ((pred[0] - 1.0).powi(2) + (pred[1] + 2.0).powi(2)) / 2.0;
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        let loss = train_reward(&mut net, &mut opt, &states, &actions, &next, &rewards).unwrap();
        assert!((loss - oracle).abs() < 1e-14);
    }

    #[test]
    fn empty_batches_rejected() {
        let mut r = rng(5);
        let mut net = SystemNet::new(2, 1, &[4], &mut r).unwrap();
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        let e2 = Matrix::zeros(0, 2);
        let e1 = Matrix::zeros(0, 1);
        assert!(matches!(
            train_system(&mut net, &mut opt, &e2, &e1, &e2),
            Err(NetError::EmptyBatch)
        ));
    }

    #[test]
    fn constant_reward_is_learned() {
        let mut r = rng(6);
        let mut net = RewardNet::new(2, 1, &[32, 32], RewardInput::StateActionNext, &mut r).unwrap();
        let mut opt = AdamState::new(&net.params, AdamConfig::default());
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let rows: Vec<f64> = (0..32 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
            let s = Matrix::new(32, 2, rows.clone()).unwrap();
            let a = Matrix::new(32, 1, (0..32).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let s2 = Matrix::new(32, 2, rows).unwrap();
            loss = train_reward(&mut net, &mut opt, &s, &a, &s2, &[-0.7; 32]).unwrap();
        }
        assert!(loss < 1e-4, "final loss {loss}");
    }

    #[test]
    fn predict_next_clips_into_declared_bounds() {
        let mut r = rng(7);
        let net = SystemNet::new(2, 1, &[4], &mut r).unwrap();
        let s = Matrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let a = Matrix::new(1, 1, vec![0.0]).unwrap();
        let raw = net.predict(&s, &a).unwrap();
        let wide = ObsBounds::declared(vec![-1e9, -1e9], vec![1e9, 1e9]);
        assert_eq!(predict_next(&net, &s, &a, &wide).unwrap(), raw);
        let lo = raw.as_slice().iter().map(|v| v - 1.0).collect::<Vec<_>>();
        let hi = raw.as_slice().iter().map(|v| v - 0.5).collect::<Vec<_>>();
        let tight = ObsBounds::declared(lo, hi.clone());
        assert_eq!(predict_next(&net, &s, &a, &tight).unwrap().as_slice(), hi.as_slice());
    }

    proptest! {
        #[test]
        fn actor_outputs_stay_within_bounds(
            seed in 0u64..1000,
            bound in 0.1f64..5.0,
            state in prop::collection::vec(-100.0f64..100.0, 3),
        ) {
            let mut r = rng(seed);
            let actor = ActorNet::new(3, 2, &[16, 16], bound, &mut r).unwrap();
            for a in actor.act_vec(&state).unwrap() {
                prop_assert!(a.abs() <= bound);
            }
        }

        #[test]
        fn soft_update_is_affine(seed in 0u64..1000, tau in 0.0f64..1.0) {
            let mut r = rng(seed);
            let online = Mlp::init(&[2, 3, 1], OutputActivation::Identity, &mut r).unwrap();
            let start = Mlp::init(&[2, 3, 1], OutputActivation::Identity, &mut r).unwrap();
            let mut t = start.clone();
            soft_update(&mut t, &online, tau).unwrap();
            prop_assert_eq!(t.dims(), start.dims());
            for ((v, a), b) in t.flat_params().iter().zip(start.flat_params()).zip(online.flat_params()) {
                prop_assert!((v - (tau * b + (1.0 - tau) * a)).abs() < 1e-15);
            }
        }
    }
}
