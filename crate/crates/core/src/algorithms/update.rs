//! Single-step update rules: critic regression, forecast rollout and the
//! actor losses of every variant.

use crate::autodiff::{mse, AdamState, ForwardCache, Gradients, Matrix, Mlp};
use crate::networks::{critic_input, predict_next, ActorNet, CriticPair, ObsBounds, RewardNet, SystemNet, TargetSet};
use crate::replay::Batch;

use super::{AlgoError, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct CriticReport {
    /// `mse(Q1, y) + mse(Q2, y)`, or `mse(Q1, y)` for a single critic.
    pub loss: f64,
    pub targets: Vec<f64>,
}

/// One regression step of the critics towards
/// `y = r + γ · not_done · min_j Q′_j(s′, ã)`, `ã = clip(A′(s′) + ε)`.
///
/// `target_noise` is the already clipped smoothing noise, one row per
/// sample; `None` uses the bare target action. With `q2_optimizer` absent
/// only `Q1` is used and trained (single-critic DDPG).
#[allow(clippy::too_many_arguments)]
pub fn critic_update(
    critics: &mut CriticPair,
    q1_optimizer: &mut AdamState,
    q2_optimizer: Option<&mut AdamState>,
    targets: &TargetSet,
    batch: &Batch,
    gamma: f64,
    action_bound: f64,
    target_noise: Option<&Matrix>,
) -> Result<CriticReport, AlgoError> {
    if batch.is_empty() {
        return Err(AlgoError::Net(crate::networks::NetError::EmptyBatch));
    }
    let twin = q2_optimizer.is_some();
    let mut next_actions = targets.actor.act(&batch.next_states)?;
    if let Some(noise) = target_noise {
        if noise.shape() != next_actions.shape() {
            return Err(AlgoError::Usage("target noise shape differs from the action batch".into()));
        }
        for (a, e) in next_actions.as_mut_slice().iter_mut().zip(noise.as_slice()) {
            *a = (*a + e).clamp(-action_bound, action_bound);
        }
    }
    let next_input = critic_input(&batch.next_states, &next_actions)?;
    let q1_next = targets.critics.q1.predict(&next_input)?;
    let q_next: Vec<f64> = if twin {
        let q2_next = targets.critics.q2.predict(&next_input)?;
        q1_next
            .as_slice()
            .iter()
            .zip(q2_next.as_slice())
            .map(|(a, b)| a.min(*b))
            .collect()
    } else {
        q1_next.into_vec()
    };
    let y: Vec<f64> = (0..batch.len())
        .map(|i| batch.rewards[i] + gamma * batch.not_done[i] * q_next[i])
        .collect();
    let input = critic_input(&batch.states, &batch.actions)?;
    let mut loss = regress(&mut critics.q1, q1_optimizer, &input, &y)?;
    if let Some(opt) = q2_optimizer {
        loss += regress(&mut critics.q2, opt, &input, &y)?;
    }
    Ok(CriticReport { loss, targets: y })
}

fn regress(net: &mut Mlp, opt: &mut AdamState, input: &Matrix, y: &[f64]) -> Result<f64, AlgoError> {
    let (pred, cache) = net.forward(input)?;
    let (loss, grad) = mse(pred.as_slice(), y)?;
    let grads = net.backward(&cache, &Matrix::new(pred.rows(), 1, grad)?)?;
    opt.step(net, &grads)?;
    Ok(loss)
}

/// `s̃′ = clip(F(s, A(s)))`, `s̃″ = clip(F(s̃′, A(s̃′)))`.
pub fn fork_rollout(
    system: &SystemNet,
    actor: &ActorNet,
    states: &Matrix,
    bounds: &ObsBounds,
) -> Result<(Matrix, Matrix), AlgoError> {
    let a0 = actor.act(states)?;
    let s1 = predict_next(system, states, &a0, bounds)?;
    let a1 = actor.act(&s1)?;
    let s2 = predict_next(system, &s1, &a1, bounds)?;
    Ok((s1, s2))
}

/// Everything the actor loss reads. `future` holds the one- and two-step
/// states (forecast or buffered) and is treated as constant.
#[derive(Clone, Copy)]
pub struct ActorLossInputs<'a> {
    pub variant: Variant,
    pub actor: &'a ActorNet,
    pub critics: &'a CriticPair,
    pub reward: &'a RewardNet,
    pub states: &'a Matrix,
    pub future: Option<(&'a Matrix, &'a Matrix)>,
    pub weight: f64,
    pub gamma: f64,
    pub dq_weight: f64,
}

/// Batch means of the individual loss terms, before weighting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActorLossTerms {
    /// `Q1(s, A(s))`.
    pub value_now: f64,
    /// `R(s, A(s), s̃′)`.
    pub reward_now: f64,
    /// `R(s̃′, A(s̃′), s̃″)`.
    pub reward_next: f64,
    /// `Q1(s̃′, A(s̃′))`.
    pub value_next: f64,
    /// `Q1(s̃″, A(s̃″))`.
    pub value_next2: f64,
}

#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub terms: ActorLossTerms,
    /// Whether any forecast term contributed.
    pub forward_looking: bool,
}

/// Loss and actor-parameter gradient.
///
/// Without `future`, with zero weight, or for the plain variants, this is
/// exactly `−mean Q1(s, A(s))`. Otherwise the variant's forecast terms are
/// added with coefficient `weight`:
///
/// * `ddpg_fork`, `td3_fork`, `td3_fork_f`, `td3_mt`:
///   `R(s, A(s), s̃′) + γ R(s̃′, A(s̃′), s̃″) + γ² Q1(s̃″, A(s̃″))`
/// * `fork_s`: `R(s, A(s), s̃′) + γ Q1(s̃′, A(s̃′))`
/// * `fork_q`, `fork_dq`: `Q1(s̃′, A(s̃′)) − w′ Q1(s̃″, A(s̃″))`
///
/// Gradients reach the actor only through its own applications; critic,
/// reward and rollout states are constants.
pub fn actor_loss(inp: ActorLossInputs<'_>) -> Result<ActorLoss, AlgoError> {
    let n = inp.states.rows();
    if n == 0 {
        return Err(AlgoError::Net(crate::networks::NetError::EmptyBatch));
    }
    let nf = n as f64;
    let act_dim = inp.actor.act_dim();
    let obs_dim = inp.actor.obs_dim();
    let q1 = &inp.critics.q1;

    let (a0, c0) = inp.actor.params.forward(inp.states)?;
    let (v0, mut g0) = value_term(q1, inp.states, &a0, -1.0 / nf, obs_dim)?;
    let mut terms = ActorLossTerms {
        value_now: mean(&v0),
        ..Default::default()
    };
    let mut loss = -terms.value_now;

    let active = inp.variant.is_forward_looking() && inp.weight != 0.0;
    let Some((s1, s2)) = inp.future.filter(|_| active) else {
        let grads = inp.actor.params.backward(&c0, &g0)?;
        return Ok(ActorLoss {
            loss,
            grads,
            terms,
            forward_looking: false,
        });
    };
    for (m, what) in [(s1, "s̃′"), (s2, "s̃″")] {
        if m.shape() != (n, obs_dim) {
            return Err(AlgoError::Usage(format!(
                "{what} batch has shape {:?}, expected ({n}, {obs_dim})",
                m.shape()
            )));
        }
    }
    let c = inp.weight / nf;
    let gamma = inp.gamma;
    let (a1, c1) = inp.actor.params.forward(s1)?;
    let mut g1 = Matrix::zeros(n, act_dim);
    let mut extra: Vec<(ForwardCache, Matrix)> = Vec::new();

    match inp.variant {
        Variant::DdpgFork | Variant::Td3Fork | Variant::Td3ForkF | Variant::Td3Mt => {
            let (r0, gr0) = reward_term(inp.reward, inp.states, &a0, s1, -c)?;
            let (r1, gr1) = reward_term(inp.reward, s1, &a1, s2, -c * gamma)?;
            let (a2, c2) = inp.actor.params.forward(s2)?;
            let (v2, gv2) = value_term(q1, s2, &a2, -c * gamma * gamma, obs_dim)?;
            terms.reward_now = mean(&r0);
            terms.reward_next = mean(&r1);
            terms.value_next2 = mean(&v2);
            loss -= inp.weight * (terms.reward_now + gamma * terms.reward_next + gamma * gamma * terms.value_next2);
            g0 = g0.add(&gr0)?;
            g1 = g1.add(&gr1)?;
            extra.push((c2, gv2));
        }
        Variant::ForkS => {
            let (r0, gr0) = reward_term(inp.reward, inp.states, &a0, s1, -c)?;
            let (v1, gv1) = value_term(q1, s1, &a1, -c * gamma, obs_dim)?;
            terms.reward_now = mean(&r0);
            terms.value_next = mean(&v1);
            loss -= inp.weight * (terms.reward_now + gamma * terms.value_next);
            g0 = g0.add(&gr0)?;
            g1 = g1.add(&gv1)?;
        }
        Variant::ForkQ | Variant::ForkDq => {
            let wp = inp.dq_weight;
            let (v1, gv1) = value_term(q1, s1, &a1, -c, obs_dim)?;
            terms.value_next = mean(&v1);
            g1 = g1.add(&gv1)?;
            let mut total = terms.value_next;
            if wp != 0.0 {
                let (a2, c2) = inp.actor.params.forward(s2)?;
                let (v2, gv2) = value_term(q1, s2, &a2, c * wp, obs_dim)?;
                terms.value_next2 = mean(&v2);
                total -= wp * terms.value_next2;
                extra.push((c2, gv2));
            }
            loss -= inp.weight * total;
        }
        Variant::Ddpg | Variant::Td3 => unreachable!("plain variants return early"),
    }

    let mut grads = inp.actor.params.backward(&c0, &g0)?;
    grads.add_assign(&inp.actor.params.backward(&c1, &g1)?)?;
    for (cache, g) in &extra {
        grads.add_assign(&inp.actor.params.backward(cache, g)?)?;
    }
    grads.input = None;
    Ok(ActorLoss {
        loss,
        grads,
        terms,
        forward_looking: true,
    })
}

/// Values `Q1(s, a)` and `coef · ∂Q1/∂a` per row.
fn value_term(
    q: &Mlp,
    states: &Matrix,
    actions: &Matrix,
    coef: f64,
    obs_dim: usize,
) -> Result<(Vec<f64>, Matrix), AlgoError> {
    let input = critic_input(states, actions)?;
    let (v, cache) = q.forward(&input)?;
    let upstream = Matrix::new(v.rows(), 1, vec![coef; v.rows()])?;
    let gin = q.input_gradient(&cache, &upstream)?;
    Ok((v.into_vec(), gin.columns(obs_dim, gin.cols())))
}

/// Values `R(s, a, s′)` and `coef · ∂R/∂a` per row.
fn reward_term(
    reward: &RewardNet,
    states: &Matrix,
    actions: &Matrix,
    next_states: &Matrix,
    coef: f64,
) -> Result<(Vec<f64>, Matrix), AlgoError> {
    let input = reward.input(states, actions, next_states)?;
    let (v, cache) = reward.params.forward(&input)?;
    let upstream = Matrix::new(v.rows(), 1, vec![coef; v.rows()])?;
    let gin = reward.params.input_gradient(&cache, &upstream)?;
    let cols = reward.action_columns();
    Ok((v.into_vec(), gin.columns(cols.start, cols.end)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
