//! Planar point mass driven to the origin by bounded acceleration.
//!
//! State `(px, py, vx, vy)`, action `(ax, ay) ∈ [−1, 1]²`. Semi-implicit
//! Euler: `v ← clip(v + dt·a)`, `p ← p + dt·v`. Leaving the arena ends the
//! episode with a penalty and the failure tag.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, EpisodeClock, StepResult, FELL_DOWN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMassParams {
    pub dt: f64,
    pub arena: f64,
    pub max_speed: f64,
    pub init_range: f64,
    pub action_cost: f64,
    pub exit_penalty: f64,
    pub horizon: usize,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            arena: 2.0,
            max_speed: 2.0,
            init_range: 1.0,
            action_cost: 0.1,
            exit_penalty: 20.0,
            horizon: 100,
        }
    }
}

pub struct PointMass {
    params: PointMassParams,
    spec: EnvSpec,
    state: [f64; 4],
    clock: EpisodeClock,
}

impl PointMass {
    pub fn new(params: PointMassParams) -> Result<Self, EnvError> {
        let p = &params;
        if !(p.dt > 0.0 && p.arena > 0.0 && p.max_speed > 0.0 && p.action_cost >= 0.0)
            || !(p.init_range >= 0.0 && p.init_range < p.arena)
            || p.horizon == 0
        {
            return Err(EnvError::InvalidParams(
                "point mass needs positive dt/arena/max_speed/horizon and init_range inside the arena".into(),
            ));
        }
        let (a, v) = (p.arena, p.max_speed);
        let spec = EnvSpec {
            obs_dim: 4,
            act_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            obs_low: Some(vec![-a, -a, -v, -v]),
            obs_high: Some(vec![a, a, v, v]),
            max_episode_steps: p.horizon,
        };
        Ok(Self {
            params,
            spec,
            state: [0.0; 4],
            clock: EpisodeClock::default(),
        })
    }

    pub fn set_state(&mut self, state: [f64; 4]) -> Vec<f64> {
        self.state = state;
        self.clock.restart();
        state.to_vec()
    }
}

impl Env for PointMass {
    fn name(&self) -> &str {
        "point_mass"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.params.init_range;
        let mut s = [0.0; 4];
        for x in &mut s[..2] {
            *x = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
        }
        Ok(self.set_state(s))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let a = self.clock.begin_step(&self.spec, "point_mass", action)?;
        let p = &self.params;
        let [px, py, vx, vy] = self.state;
        let vx = (vx + p.dt * a[0]).clamp(-p.max_speed, p.max_speed);
        let vy = (vy + p.dt * a[1]).clamp(-p.max_speed, p.max_speed);
        let (px, py) = (px + p.dt * vx, py + p.dt * vy);
        let escaped = px.abs() > p.arena || py.abs() > p.arena;
        let mut reward = -(px.hypot(py)) - p.action_cost * (a[0] * a[0] + a[1] * a[1]);
        if escaped {
            reward -= p.exit_penalty;
        }
        let (px, py) = (px.clamp(-p.arena, p.arena), py.clamp(-p.arena, p.arena));
        self.state = [px, py, vx, vy];
        let (done, done_is_timeout) = self.clock.end_step(p.horizon, escaped);
        let mut info = std::collections::BTreeMap::new();
        if done {
            info.insert(FELL_DOWN.to_string(), escaped);
        }
        Ok(StepResult {
            next_state: self.state.to_vec(),
            reward,
            done,
            done_is_timeout,
            info,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_step_by_hand() {
        let mut env = PointMass::new(PointMassParams::default()).unwrap();
        env.set_state([0.5, -0.5, 0.2, 0.0]);
        let r = env.step(&[1.0, -0.5]).unwrap();
        let v = [0.2 + 0.1, -0.05];
        let p = [0.5 + 0.1 * v[0], -0.5 + 0.1 * v[1]];
        assert_eq!(r.next_state, vec![p[0], p[1], v[0], v[1]]);
        let expected = -(p[0] * p[0] + p[1] * p[1]).sqrt() - 0.1 * 1.25;
        assert!((r.reward - expected).abs() < 1e-15);
        assert!(!r.done);
    }

    #[test]
    fn leaving_the_arena_terminates_with_failure() {
        let mut env = PointMass::new(PointMassParams::default()).unwrap();
        env.set_state([1.99, 0.0, 2.0, 0.0]);
        let r = env.step(&[1.0, 0.0]).unwrap();
        assert!(r.done && !r.done_is_timeout && r.fell_down());
        assert!(r.reward < -20.0);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn staying_put_times_out_without_failure() {
        let mut env = PointMass::new(PointMassParams {
            horizon: 5,
            ..Default::default()
        })
        .unwrap();
        env.set_state([0.0; 4]);
        for t in 0..5 {
            let r = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(r.reward, 0.0);
            assert_eq!(r.done, t == 4);
            if r.done {
                assert!(r.done_is_timeout && !r.fell_down());
            }
        }
    }
}
