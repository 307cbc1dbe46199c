use serde::{Deserialize, Serialize};

/// How `r̄` summarises past episode returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightAveraging {
    /// Arithmetic mean over every finished episode.
    #[default]
    RunningMean,
    /// `r̄ ← (1 − α) r̄ + α r`, seeded with the first return.
    Exponential { alpha: f64 },
}

/// `w₀ · clamp(1 − r̄ / r₀, 0, 1)`: full weight while the average return is
/// non-positive, fading to zero as it reaches the base reward.
pub fn adaptive_weight(mean_return: f64, base_reward: f64, base_weight: f64) -> f64 {
    base_weight * (1.0 - mean_return / base_reward).clamp(0.0, 1.0)
}

/// Forecast terms are used only once the system network's latest training
/// loss is at or below the threshold. NaN keeps the gate closed.
pub fn threshold_gate(system_loss: f64, threshold: f64) -> bool {
    system_loss <= threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeightState {
    mean_return: f64,
    episodes: u64,
    weight: f64,
    base_weight: f64,
    base_reward: f64,
    averaging: WeightAveraging,
}

impl AdaptiveWeightState {
    /// Starts at `r̄ = 0`, hence `w = w₀`.
    pub fn new(base_weight: f64, base_reward: f64, averaging: WeightAveraging) -> Self {
        Self {
            mean_return: 0.0,
            episodes: 0,
            weight: adaptive_weight(0.0, base_reward, base_weight),
            base_weight,
            base_reward,
            averaging,
        }
    }

    /// Folds one finished episode's return into `r̄` and recomputes `w`.
    pub fn record_episode(&mut self, episode_return: f64) -> f64 {
        self.episodes += 1;
        let e = self.episodes as f64;
        self.mean_return = match self.averaging {
            WeightAveraging::RunningMean => ((e - 1.0) * self.mean_return + episode_return) / e,
            WeightAveraging::Exponential { alpha } if self.episodes > 1 => {
                (1.0 - alpha) * self.mean_return + alpha * episode_return
            }
            WeightAveraging::Exponential { .. } => episode_return,
        };
        self.weight = adaptive_weight(self.mean_return, self.base_reward, self.base_weight);
        self.weight
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean_return(&self) -> f64 {
        self.mean_return
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_cases() {
        assert_eq!(adaptive_weight(-5.0, 320.0, 0.6), 0.6);
        assert_eq!(adaptive_weight(0.0, 320.0, 0.6), 0.6);
        assert_eq!(adaptive_weight(320.0, 320.0, 0.6), 0.0);
        assert_eq!(adaptive_weight(160.0, 320.0, 0.6), 0.3);
        assert_eq!(adaptive_weight(1000.0, 320.0, 0.6), 0.0);
    }

    #[test]
    fn gate_boundaries() {
        assert!(threshold_gate(0.01, 0.01));
        assert!(!threshold_gate(0.010_000_1, 0.01));
        assert!(!threshold_gate(f64::INFINITY, 0.01));
        assert!(!threshold_gate(f64::NAN, 0.01));
    }

    #[test]
    fn averaging_parses_from_toml() {
        #[derive(Deserialize)]
        struct W {
            w: WeightAveraging,
        }
        let w: W = toml::from_str("w = \"running_mean\"").unwrap();
        assert_eq!(w.w, WeightAveraging::RunningMean);
        let w: W = toml::from_str("[w.exponential]\nalpha = 0.1").unwrap();
        assert_eq!(w.w, WeightAveraging::Exponential { alpha: 0.1 });
    }

    #[test]
    fn exponential_average_starts_from_first_return() {
        let mut s = AdaptiveWeightState::new(0.6, 100.0, WeightAveraging::Exponential { alpha: 0.5 });
        s.record_episode(40.0);
        assert_eq!(s.mean_return(), 40.0);
        s.record_episode(80.0);
        assert_eq!(s.mean_return(), 60.0);
        assert!((s.weight() - 0.6 * 0.4).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn running_mean_is_arithmetic_mean_and_weight_is_bounded(
            returns in proptest::collection::vec(-1e4f64..1e4, 1..60),
            r0 in 1e-3f64..1e4,
            w0 in 0.0f64..2.0,
        ) {
            let mut s = AdaptiveWeightState::new(w0, r0, WeightAveraging::RunningMean);
            prop_assert_eq!(s.weight(), w0);
            for (k, r) in returns.iter().enumerate() {
                let w = s.record_episode(*r);
                prop_assert!((0.0..=w0).contains(&w));
                let mean = returns[..=k].iter().sum::<f64>() / (k + 1) as f64;
                prop_assert!((s.mean_return() - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            }
        }
    }
}
