//! Episode admission that keeps failed and successful episodes entering the
//! buffer at a fixed ratio (5:1 by default).
//!
//! Implemented as a token bucket: every admitted failed episode adds
//! `success_weight` tokens and a successful episode is admitted only if it can
//! pay `failed_weight` tokens. The bucket starts with one success worth of
//! tokens so the very first successful episode is not lost.

use serde::{Deserialize, Serialize};

use super::{ReplayBuffer, ReplayError, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeOutcome {
    Failed,
    Success,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioAdmissionPolicy {
    failed_weight: u64,
    success_weight: u64,
    tokens: u64,
    admitted_failed: u64,
    admitted_success: u64,
    rejected_success: u64,
}

impl Default for RatioAdmissionPolicy {
    fn default() -> Self {
        Self::new(5, 1)
    }
}

impl RatioAdmissionPolicy {
    pub fn new(failed_weight: u64, success_weight: u64) -> Self {
        assert!(failed_weight > 0 && success_weight > 0);
        Self {
            failed_weight,
            success_weight,
            tokens: failed_weight,
            admitted_failed: 0,
            admitted_success: 0,
            rejected_success: 0,
        }
    }

    pub fn admitted_failed(&self) -> u64 {
        self.admitted_failed
    }

    pub fn admitted_success(&self) -> u64 {
        self.admitted_success
    }

    pub fn rejected_success(&self) -> u64 {
        self.rejected_success
    }

    /// Decides admission without touching a buffer.
    pub fn decide(&mut self, outcome: EpisodeOutcome) -> bool {
        match outcome {
            EpisodeOutcome::Failed => {
                self.admitted_failed += 1;
                self.tokens += self.success_weight;
                true
            }
            EpisodeOutcome::Success if self.tokens >= self.failed_weight => {
                self.tokens -= self.failed_weight;
                self.admitted_success += 1;
                true
            }
            EpisodeOutcome::Success => {
                self.rejected_success += 1;
                false
            }
        }
    }

    /// Pushes `episode` transition by transition when admitted.
    pub fn admit_episode(
        &mut self,
        buffer: &mut ReplayBuffer,
        episode: Vec<Transition>,
        outcome: EpisodeOutcome,
    ) -> Result<bool, ReplayError> {
        let admitted = self.decide(outcome);
        if admitted {
            let closed = episode.last().is_some_and(|t| t.done);
            for t in episode {
                buffer.push(t)?;
            }
            if !closed {
                buffer.end_episode();
            }
        }
        Ok(admitted)
    }
}
