//! Threshold calibration: how low does the system-network loss get on a
//! given environment, and which reward-network input fits better.
//!
//! Both runs act uniformly at random for the whole budget, so neither the
//! actor nor the critics train and the data depends only on the seed.

use serde::{Deserialize, Serialize};

use crate::algorithms::{Agent, AgentConfig, Trainer, TrainerOptions, Variant};
use crate::envs::EnvConfig;
use crate::networks::RewardInput;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub env: String,
    pub steps: u64,
    /// System loss at every model update.
    pub system_losses: Vec<f64>,
    /// Median system loss over the last tenth of the run; a threshold at
    /// or just above it opens the gate once the model is this accurate.
    pub typical_system_loss: f64,
    /// Mean reward loss over the last tenth with `R(s, a)`.
    pub reward_loss_state_action: f64,
    /// Same with `R(s, a, s′)`.
    pub reward_loss_state_action_next: f64,
}

pub fn calibrate(env: &EnvConfig, agent: &AgentConfig, steps: u64, seed: u64) -> Result<Calibration, HarnessError> {
    if steps == 0 {
        return Err(HarnessError::Config("calibration needs at least one step".into()));
    }
    let run = |input: RewardInput| -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
        let config = AgentConfig {
            variant: Variant::Td3Fork,
            reward_input: input,
            exploration_steps: usize::try_from(steps).unwrap_or(usize::MAX),
            ..agent.clone()
        };
        let e = env.build()?;
        let a = Agent::new(config, e.spec(), seed)?;
        let mut trainer = Trainer::new(a, e, TrainerOptions::default(), seed)?;
        let (mut sys, mut rew) = (Vec::new(), Vec::new());
        for _ in 0..steps {
            let m = trainer.train_iteration()?;
            sys.extend(m.update.system_loss);
            rew.extend(m.update.reward_loss);
        }
        Ok((sys, rew))
    };
    let (system_losses, reward_sa) = run(RewardInput::StateAction)?;
    let (_, reward_san) = run(RewardInput::StateActionNext)?;
    if system_losses.is_empty() {
        return Err(HarnessError::Config(format!(
            "{steps} steps never filled a batch of {}",
            agent.batch_size
        )));
    }
    let tail = |v: &[f64]| v[v.len() - (v.len() / 10).max(1)..].to_vec();
    let mut last = tail(&system_losses);
    last.sort_by(f64::total_cmp);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(Calibration {
        env: env.name().to_string(),
        steps,
        typical_system_loss: last[last.len() / 2],
        reward_loss_state_action: mean(tail(&reward_sa)),
        reward_loss_state_action_next: mean(tail(&reward_san)),
        system_losses,
    })
}
