//! Torque-limited inverted pendulum swing-up, matching the classic gym
//! dynamics. Observation `(cos θ, sin θ, θ̇)`, one torque action.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Env, EnvError, EnvSpec, EpisodeClock, StepResult, FELL_DOWN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    pub horizon: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
            horizon: 200,
        }
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    clock: EpisodeClock,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self, EnvError> {
        let p = &params;
        if !(p.dt > 0.0 && p.mass > 0.0 && p.length > 0.0 && p.max_speed > 0.0 && p.max_torque > 0.0)
            || p.horizon == 0
        {
            return Err(EnvError::InvalidParams(
                "pendulum needs positive dt, mass, length, max_speed, max_torque and horizon".into(),
            ));
        }
        let spec = EnvSpec {
            obs_dim: 3,
            act_dim: 1,
            action_low: vec![-p.max_torque],
            action_high: vec![p.max_torque],
            obs_low: Some(vec![-1.0, -1.0, -p.max_speed]),
            obs_high: Some(vec![1.0, 1.0, p.max_speed]),
            max_episode_steps: p.horizon,
        };
        Ok(Self {
            params,
            spec,
            theta: 0.0,
            theta_dot: 0.0,
            clock: EpisodeClock::default(),
        })
    }

    /// Places the pendulum at an arbitrary state and starts a fresh episode.
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) -> Vec<f64> {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.clock.restart();
        self.observation()
    }

    pub fn angle(&self) -> f64 {
        angle_normalize(self.theta)
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Env for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.gen_range(-PI..PI);
        let theta_dot = rng.gen_range(-1.0..1.0);
        Ok(self.set_state(theta, theta_dot))
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        let u = self.clock.begin_step(&self.spec, "pendulum", action)?[0];
        let p = &self.params;
        let th = self.theta;
        let cost = angle_normalize(th).powi(2) + 0.1 * self.theta_dot.powi(2) + 0.001 * u * u;
        let accel = 3.0 * p.gravity / (2.0 * p.length) * th.sin() + 3.0 / (p.mass * p.length * p.length) * u;
        self.theta_dot = (self.theta_dot + accel * p.dt).clamp(-p.max_speed, p.max_speed);
        self.theta = th + self.theta_dot * p.dt;
        let (done, done_is_timeout) = self.clock.end_step(p.horizon, false);
        let mut info = std::collections::BTreeMap::new();
        if done {
            // an episode that ends away from upright counts as a failure
            info.insert(FELL_DOWN.to_string(), self.angle().abs() > PI / 2.0);
        }
        Ok(StepResult {
            next_state: self.observation(),
            reward: -cost,
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
    fn upright_at_rest_is_an_equilibrium() {
        let mut env = Pendulum::new(PendulumParams::default()).unwrap();
        env.set_state(0.0, 0.0);
        for _ in 0..50 {
            let r = env.step(&[0.0]).unwrap();
            assert_eq!(r.next_state, vec![1.0, 0.0, 0.0]);
            assert_eq!(r.reward, 0.0);
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut env = Pendulum::new(PendulumParams::default()).unwrap();
        env.set_state(0.5, 0.2);
        let r = env.step(&[1.0]).unwrap();
        let thdot: f64 = 0.2 + (15.0 * 0.5f64.sin() + 3.0) * 0.05;
        let th = 0.5 + thdot * 0.05;
        assert!((r.next_state[2] - thdot).abs() < 1e-15);
        assert!((r.next_state[0] - th.cos()).abs() < 1e-15);
        assert!((r.reward + (0.25 + 0.1 * 0.04 + 0.001)).abs() < 1e-15);
    }

    #[test]
    fn speed_is_clamped() {
        let mut env = Pendulum::new(PendulumParams::default()).unwrap();
        env.set_state(PI / 2.0, 7.99);
        let r = env.step(&[2.0]).unwrap();
        assert_eq!(r.next_state[2], 8.0);
    }

    #[test]
    fn angle_normalize_wraps() {
        assert!((angle_normalize(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((angle_normalize(-0.25) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn hanging_at_timeout_is_tagged_as_failure() {
        let mut env = Pendulum::new(PendulumParams {
            horizon: 3,
            ..Default::default()
        })
        .unwrap();
        env.set_state(PI, 0.0);
        let mut last = None;
        for _ in 0..3 {
            last = Some(env.step(&[0.0]).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && last.done_is_timeout && last.fell_down());
    }
}
