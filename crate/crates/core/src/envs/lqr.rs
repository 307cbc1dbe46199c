//! Linear-quadratic regulator environment and its exact Riccati oracle.
//!
//! Dynamics `s′ = A s + B a + ε`, `ε ~ N(0, noise_std² I)`, reward
//! `r = −(sᵀQs + aᵀRa)`. There is no failure state; episodes end at the
//! horizon.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, EpisodeClock, StepResult};
use crate::autodiff::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrEnvParams {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub noise_std: f64,
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
    pub action_bound: f64,
    pub horizon: usize,
}

impl Default for LqrEnvParams {
    /// Noiseless, mildly damped coupled system with actuation on both
    /// coordinates. The optimal gain saturates the unit action bound only
    /// near the corners of the initial box, so the unclipped oracle stays a
    /// tight reference.
    fn default() -> Self {
        Self {
            a: Matrix::new(2, 2, vec![0.95, 0.1, 0.0, 0.95]).unwrap(),
            b: Matrix::new(2, 2, vec![0.2, 0.0, 0.0, 0.2]).unwrap(),
            q: Matrix::identity(2),
            r: Matrix::new(2, 2, vec![0.1, 0.0, 0.0, 0.1]).unwrap(),
            noise_std: 0.0,
            init_low: vec![-1.0, -1.0],
            init_high: vec![1.0, 1.0],
            action_bound: 1.0,
            horizon: 50,
        }
    }
}

impl LqrEnvParams {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let n = self.a.rows();
        let m = self.b.cols();
        let bad = |msg: String| Err(EnvError::InvalidParams(msg));
        if self.a.cols() != n || n == 0 {
            return bad(format!("A must be square, got {:?}", self.a.shape()));
        }
        if self.b.rows() != n || m == 0 {
            return bad(format!("B must be {n}xm, got {:?}", self.b.shape()));
        }
        if self.q.shape() != (n, n) || self.r.shape() != (m, m) {
            return bad("Q must be nxn and R mxm".into());
        }
        if !is_symmetric(&self.q) || !is_symmetric(&self.r) {
            return bad("Q and R must be symmetric".into());
        }
        if cholesky(&self.r).is_none() {
            return bad("R must be positive definite".into());
        }
        let mut q_shift = self.q.clone();
        for i in 0..n {
            q_shift.set(i, i, q_shift.get(i, i) + 1e-9 * (1.0 + self.q.get(i, i).abs()));
        }
        if cholesky(&q_shift).is_none() {
            return bad("Q must be positive semidefinite".into());
        }
        if self.init_low.len() != n || self.init_high.len() != n {
            return bad("initial-state bounds must have the state dimension".into());
        }
        if self.init_low.iter().zip(&self.init_high).any(|(l, h)| l > h) {
            return bad("init_low must not exceed init_high".into());
        }
        if !(self.noise_std >= 0.0) || !(self.action_bound > 0.0) || self.horizon == 0 {
            return bad("noise_std >= 0, action_bound > 0, horizon > 0 required".into());
        }
        Ok(())
    }

    /// Per-step reward for state `s` and applied action `a`.
    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        -(quad(&self.q, s) + quad(&self.r, a))
    }

    /// Noise-free successor `A s + B a`.
    pub fn mean_next(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let a_s = self.a.mul_vec(s).expect("validated dims");
        let b_a = self.b.mul_vec(a).expect("validated dims");
        a_s.iter().zip(&b_a).map(|(x, y)| x + y).collect()
    }

    pub fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.init_low
            .iter()
            .zip(&self.init_high)
            .map(|(&lo, &hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
            .collect()
    }
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    let mv = m.mul_vec(v).expect("validated dims");
    v.iter().zip(&mv).map(|(a, b)| a * b).sum()
}

fn is_symmetric(m: &Matrix) -> bool {
    (0..m.rows()).all(|i| (0..m.cols()).all(|j| (m.get(i, j) - m.get(j, i)).abs() <= 1e-12))
}

fn cholesky(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

pub struct LqrEnv {
    params: LqrEnvParams,
    spec: EnvSpec,
    state: Vec<f64>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    clock: EpisodeClock,
}

impl LqrEnv {
    pub fn new(params: LqrEnvParams) -> Result<Self, EnvError> {
        params.validate()?;
        let m = params.action_dim();
        let spec = EnvSpec {
            obs_dim: params.state_dim(),
            act_dim: m,
            action_low: vec![-params.action_bound; m],
            action_high: vec![params.action_bound; m],
            obs_low: None,
            obs_high: None,
            max_episode_steps: params.horizon,
        };
        let noise = (params.noise_std > 0.0)
            .then(|| Normal::new(0.0, params.noise_std).expect("validated std"));
        Ok(Self {
            state: vec![0.0; spec.obs_dim],
            spec,
            params,
            rng: ChaCha8Rng::seed_from_u64(0),
            noise,
            clock: EpisodeClock::default(),
        })
    }

    pub fn params(&self) -> &LqrEnvParams {
        &self.params
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }
}

impl Env for LqrEnv {
    fn name(&self) -> &str {
        "lqr"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.params.sample_initial(&mut self.rng);
        self.clock.restart();
        Ok(self.state.clone())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let a = self.clock.begin_step(&self.spec, "lqr", action)?;
        let reward = self.params.reward(&self.state, &a);
        let mut next = self.params.mean_next(&self.state, &a);
        if let Some(noise) = &self.noise {
            for v in &mut next {
                *v += noise.sample(&mut self.rng);
            }
        }
        self.state = next.clone();
        let (done, done_is_timeout) = self.clock.end_step(self.params.horizon, false);
        Ok(StepResult {
            next_state: next,
            reward,
            done,
            done_is_timeout,
            info: Default::default(),
        })
    }
}

/// Optimal linear policy `a = −K s` for the discounted infinite-horizon
/// problem and its rolled-out return.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrOracle {
    pub gain: Matrix,
    /// Fixed point `P` of the discounted Riccati recursion.
    pub value_matrix: Matrix,
    pub iterations: usize,
    /// Mean undiscounted episode return of the gain policy.
    pub expected_return: f64,
    pub episode_returns: Vec<f64>,
}

/// Number of seeded episodes the oracle return is averaged over.
pub const ORACLE_EPISODES: u64 = 100;

/// Iterates `P ← Q + γAᵀPA − γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA` to a fixed point
/// (max-abs change below 1e-10), then rolls `a = −K s` with
/// `K = γ(R + γBᵀPB)⁻¹BᵀPA` over episodes seeded `0..100` of length
/// `horizon`.
pub fn lqr_oracle(params: &LqrEnvParams, gamma: f64, horizon: usize) -> Result<LqrOracle, EnvError> {
    lqr_oracle_with_seeds(params, gamma, horizon, 0..ORACLE_EPISODES)
}

pub fn lqr_oracle_with_seeds(
    params: &LqrEnvParams,
    gamma: f64,
    horizon: usize,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<LqrOracle, EnvError> {
    params.validate()?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(EnvError::InvalidParams(format!("gamma {gamma} outside (0, 1]")));
    }
    let (a, b, q, r) = (&params.a, &params.b, &params.q, &params.r);
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let max_iter = 1_000_000;
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    let gain_for = |p: &Matrix| -> Result<Matrix, EnvError> {
        let s = r.add(&bt.matmul(p)?.matmul(b)?.scale(gamma))?;
        let rhs = bt.matmul(p)?.matmul(a)?.scale(gamma);
        Ok(s.solve(&rhs)?)
    };
    while iterations < max_iter {
        iterations += 1;
        let k = gain_for(&p)?;
        // P = Q + γAᵀPA − γAᵀPB K
        let apa = at.matmul(&p)?.matmul(a)?.scale(gamma);
        let apbk = at.matmul(&p)?.matmul(b)?.matmul(&k)?.scale(gamma);
        let next = q.add(&apa)?.sub(&apbk)?;
        if !next.is_finite() {
            return Err(EnvError::NonConvergent(format!(
                "value matrix diverged after {iterations} iterations"
            )));
        }
        delta = next
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        p = next;
        if delta < 1e-10 {
            break;
        }
    }
    if delta >= 1e-10 {
        return Err(EnvError::NonConvergent(format!(
            "max change {delta:e} after {iterations} iterations"
        )));
    }
    let gain = gain_for(&p)?;
    let episode_returns = rollout_linear_policy(params, &gain, horizon, seeds)?;
    let expected_return = episode_returns.iter().sum::<f64>() / episode_returns.len().max(1) as f64;
    Ok(LqrOracle {
        gain,
        value_matrix: p,
        iterations,
        expected_return,
        episode_returns,
    })
}

/// Undiscounted returns of `a = clip(−K s)` on fresh environments, one
/// episode per seed.
pub fn rollout_linear_policy(
    params: &LqrEnvParams,
    gain: &Matrix,
    horizon: usize,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<f64>, EnvError> {
    let mut env = LqrEnv::new(LqrEnvParams {
        horizon,
        ..params.clone()
    })?;
    if gain.shape() != (params.action_dim(), params.state_dim()) {
        return Err(EnvError::DimensionMismatch {
            what: "gain rows",
            expected: params.action_dim(),
            got: gain.rows(),
        });
    }
    let mut returns = Vec::new();
    for seed in seeds {
        let mut s = env.reset(seed)?;
        let mut total = 0.0;
        loop {
            let mut act: Vec<f64> = gain.mul_vec(&s)?.into_iter().map(|v| -v).collect();
            env.spec().clip_action(&mut act);
            let res = env.step(&act)?;
            total += res.reward;
            s = res.next_state;
            if res.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}
