use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::AgentConfig;
use crate::envs::EnvConfig;

use super::HarnessError;

/// A full experiment: environment, agent, schedule and logging.
///
/// Written as TOML with `[env]` and `[agent]` tables; every key has a
/// default, so a file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label; defaults to `<env>-<variant>` when empty.
    pub name: String,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Number of independent instances `M`.
    pub instances: usize,
    /// One seed per instance; empty means `0..instances`.
    pub seeds: Vec<u64>,
    /// Write a training row every this many steps. Episode ends and
    /// evaluations are always written.
    pub log_interval: u64,
    /// Rewards `−100 → −5`, others `×5`.
    pub hardcore_shaping: bool,
    /// Admit failed and successful episodes at 5:1.
    pub ratio_admission: bool,
    /// Fill the `wall_ms` column. Off by default so reruns are
    /// byte-identical.
    pub record_wall_clock: bool,
    /// Store the replay buffer in the final checkpoints.
    pub checkpoint_buffer: bool,
    /// Instances run concurrently on this many threads.
    pub workers: usize,
    /// Extra reference returns for the steps-to-reference summary.
    pub references: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            total_steps: 1_000_000,
            eval_interval: 5_000,
            eval_episodes: 10,
            instances: 5,
            seeds: Vec::new(),
            log_interval: 1,
            hardcore_shaping: false,
            ratio_admission: false,
            record_wall_clock: false,
            checkpoint_buffer: false,
            workers: 1,
            references: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive".into());
        }
        if self.total_steps % self.eval_interval != 0 {
            return bad(format!(
                "eval_interval {} does not divide total_steps {}",
                self.eval_interval, self.total_steps
            ));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1".into());
        }
        if self.instances == 0 {
            return bad("instances must be at least 1".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.instances {
            return bad(format!("{} seeds for {} instances", self.seeds.len(), self.instances));
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.agent.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn instance_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.instances as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn run_name(&self) -> String {
        if self.name.is_empty() {
            format!("{}-{}", self.env.name(), self.agent.variant)
        } else {
            self.name.clone()
        }
    }

    pub fn evaluations_per_instance(&self) -> u64 {
        self.total_steps / self.eval_interval + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::Variant;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            total_steps = 20
            eval_interval = 10
            [env]
            kind = "point_mass"
            [agent]
            variant = "td3"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.agent.variant, Variant::Td3);
        assert_eq!(cfg.agent.gamma, 0.99);
        assert_eq!(cfg.eval_episodes, 10);
        assert_eq!(cfg.instance_seeds(), vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.run_name(), "point_mass-td3");
        assert_eq!(cfg.evaluations_per_instance(), 3);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            total_steps: 100,
            eval_interval: 50,
            seeds: vec![7, 8, 9, 10, 11],
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_inconsistent_schedules() {
        let base = ExperimentConfig {
            total_steps: 100,
            eval_interval: 50,
            ..Default::default()
        };
        for bad in [
            ExperimentConfig { eval_interval: 30, ..base.clone() },
            ExperimentConfig { eval_interval: 0, ..base.clone() },
            ExperimentConfig { seeds: vec![1, 2], ..base.clone() },
            ExperimentConfig { eval_episodes: 0, ..base.clone() },
            ExperimentConfig { instances: 0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(ExperimentConfig::from_toml("total_step = 5").is_err());
    }
}
