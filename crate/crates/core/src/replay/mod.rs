//! Experience storage: a FIFO ring buffer with uniform sampling,
//! same-episode sequence sampling, and ratio-based episode admission.

mod admission;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;

pub use admission::{EpisodeOutcome, RatioAdmissionPolicy};

/// Default capacity of the replay buffer.
pub const DEFAULT_CAPACITY: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    Empty,
    #[error("transition dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("no stored episode segment of {0} consecutive transitions")]
    SequenceUnavailable(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serialization(String),
}

/// One environment interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// The episode ended because of the time limit rather than a true
    /// terminal state.
    pub done_is_timeout: bool,
}

impl Transition {
    /// `0` when the value of `next_state` must not be bootstrapped.
    pub fn bootstrap_mask(&self) -> f64 {
        if self.done && !self.done_is_timeout {
            0.0
        } else {
            1.0
        }
    }
}

/// Column-oriented minibatch, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// Bootstrap masks, see [`Transition::bootstrap_mask`].
    pub not_done: Vec<f64>,
    /// Insertion sequence numbers of the sampled transitions.
    pub sequence_ids: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Sequences of consecutive same-episode transitions. `steps[k]` row `i` is
/// the `k`-th transition of sequence `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub steps: Vec<Batch>,
}

/// Fixed-capacity FIFO experience store.
///
/// Every pushed transition gets a monotonically increasing sequence number
/// and the id of the episode it belongs to. A transition with `done` set
/// closes its episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<bool>,
    timeouts: Vec<bool>,
    episode_ids: Vec<u64>,
    /// Sequence number of the next push; slot of sequence `k` is `k % capacity`.
    next_seq: u64,
    current_episode: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::InvalidArgument("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_dim,
            act_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            timeouts: Vec::new(),
            episode_ids: Vec::new(),
            next_seq: 0,
            current_episode: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Sequence number of the oldest stored transition.
    pub fn oldest_seq(&self) -> u64 {
        self.next_seq - self.len() as u64
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        if t.state.len() != self.obs_dim
            || t.next_state.len() != self.obs_dim
            || t.action.len() != self.act_dim
        {
            return Err(ReplayError::Dimension(format!(
                "state {} / action {} / next {} vs expected {} / {} / {}",
                t.state.len(),
                t.action.len(),
                t.next_state.len(),
                self.obs_dim,
                self.act_dim,
                self.obs_dim
            )));
        }
        if !t.reward.is_finite() {
            return Err(ReplayError::NonFiniteReward(t.reward));
        }
        let episode = self.current_episode;
        if t.done {
            self.current_episode += 1;
        }
        if self.len() < self.capacity {
            self.states.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_states.extend_from_slice(&t.next_state);
            self.dones.push(t.done);
            self.timeouts.push(t.done_is_timeout);
            self.episode_ids.push(episode);
        } else {
            let slot = (self.next_seq % self.capacity as u64) as usize;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.states[slot * o..(slot + 1) * o].copy_from_slice(&t.state);
            self.actions[slot * a..(slot + 1) * a].copy_from_slice(&t.action);
            self.rewards[slot] = t.reward;
            self.next_states[slot * o..(slot + 1) * o].copy_from_slice(&t.next_state);
            self.dones[slot] = t.done;
            self.timeouts[slot] = t.done_is_timeout;
            self.episode_ids[slot] = episode;
        }
        self.next_seq += 1;
        Ok(())
    }

    /// Starts a new episode even though the last transition was not `done`
    /// (e.g. a discarded partial episode).
    pub fn end_episode(&mut self) {
        self.current_episode += 1;
    }

    fn slot(&self, seq: u64) -> usize {
        (seq % self.capacity as u64) as usize
    }

    /// Transition with sequence number `seq`, if still stored.
    pub fn get(&self, seq: u64) -> Option<Transition> {
        if seq < self.oldest_seq() || seq >= self.next_seq {
            return None;
        }
        let s = self.slot(seq);
        let (o, a) = (self.obs_dim, self.act_dim);
        Some(Transition {
            state: self.states[s * o..(s + 1) * o].to_vec(),
            action: self.actions[s * a..(s + 1) * a].to_vec(),
            reward: self.rewards[s],
            next_state: self.next_states[s * o..(s + 1) * o].to_vec(),
            done: self.dones[s],
            done_is_timeout: self.timeouts[s],
        })
    }

    /// Episode id of the transition with sequence number `seq`.
    pub fn episode_of(&self, seq: u64) -> Option<u64> {
        (seq >= self.oldest_seq() && seq < self.next_seq).then(|| self.episode_ids[self.slot(seq)])
    }

    fn gather(&self, seqs: Vec<u64>) -> Batch {
        let n = seqs.len();
        let (o, a) = (self.obs_dim, self.act_dim);
        let mut states = Vec::with_capacity(n * o);
        let mut actions = Vec::with_capacity(n * a);
        let mut next_states = Vec::with_capacity(n * o);
        let mut rewards = Vec::with_capacity(n);
        let mut not_done = Vec::with_capacity(n);
        for &seq in &seqs {
            let s = self.slot(seq);
            states.extend_from_slice(&self.states[s * o..(s + 1) * o]);
            actions.extend_from_slice(&self.actions[s * a..(s + 1) * a]);
            next_states.extend_from_slice(&self.next_states[s * o..(s + 1) * o]);
            rewards.push(self.rewards[s]);
            not_done.push(if self.dones[s] && !self.timeouts[s] { 0.0 } else { 1.0 });
        }
        Batch {
            states: Matrix::from_raw(n, o, states),
            actions: Matrix::from_raw(n, a, actions),
            rewards,
            next_states: Matrix::from_raw(n, o, next_states),
            not_done,
            sequence_ids: seqs,
        }
    }

    /// `n` independent uniform draws with replacement.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch, ReplayError> {
        if n == 0 {
            return Ok(self.gather(Vec::new()));
        }
        if self.is_empty() {
            return Err(ReplayError::Empty);
        }
        let oldest = self.oldest_seq();
        let len = self.len() as u64;
        let seqs = (0..n).map(|_| oldest + rng.gen_range(0..len)).collect();
        Ok(self.gather(seqs))
    }

    /// True when transitions `start..start+length` are all stored and
    /// belong to one episode.
    pub fn is_sequence_start(&self, start: u64, length: usize) -> bool {
        let end = start + length as u64;
        if start < self.oldest_seq() || end > self.next_seq || length == 0 {
            return false;
        }
        let episode = self.episode_ids[self.slot(start)];
        (start + 1..end).all(|seq| self.episode_ids[self.slot(seq)] == episode)
    }

    /// `n` sequences of `length` consecutive transitions, each drawn
    /// uniformly over valid start positions and never crossing an episode
    /// boundary.
    pub fn sample_consecutive<R: Rng + ?Sized>(
        &self,
        n: usize,
        length: usize,
        rng: &mut R,
    ) -> Result<SequenceBatch, ReplayError> {
        if length == 0 {
            return Err(ReplayError::InvalidArgument("sequence length must be positive".into()));
        }
        if self.len() < length {
            return Err(ReplayError::SequenceUnavailable(length));
        }
        let oldest = self.oldest_seq();
        let span = (self.len() - length + 1) as u64;
        let mut starts = Vec::with_capacity(n);
        let mut eligible: Option<Vec<u64>> = None;
        for _ in 0..n {
            let mut found = None;
            for _ in 0..64 {
                let candidate = oldest + rng.gen_range(0..span);
                if self.is_sequence_start(candidate, length) {
                    found = Some(candidate);
                    break;
                }
            }
            let start = match found {
                Some(s) => s,
                None => {
                    let list = eligible.get_or_insert_with(|| {
                        (oldest..oldest + span)
                            .filter(|&s| self.is_sequence_start(s, length))
                            .collect()
                    });
                    if list.is_empty() {
                        return Err(ReplayError::SequenceUnavailable(length));
                    }
                    list[rng.gen_range(0..list.len())]
                }
            };
            starts.push(start);
        }
        if n == 0 && !(oldest..oldest + span).any(|s| self.is_sequence_start(s, length)) {
            return Err(ReplayError::SequenceUnavailable(length));
        }
        let steps = (0..length as u64)
            .map(|k| self.gather(starts.iter().map(|s| s + k).collect()))
            .collect();
        Ok(SequenceBatch { steps })
    }

    /// Writes every stored transition, oldest first, as one JSON object per line.
    pub fn dump_ndjson<W: Write>(&self, mut out: W) -> Result<(), ReplayError> {
        for seq in self.oldest_seq()..self.next_seq {
            let t = self.get(seq).expect("sequence in range");
            serde_json::to_writer(&mut out, &t)
                .map_err(|e| ReplayError::Serialization(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ReplayError> {
        bincode::serialize(self).map_err(|e| ReplayError::Serialization(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        bincode::deserialize(bytes).map_err(|e| ReplayError::Serialization(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(x: f64, done: bool) -> Transition {
        Transition {
            state: vec![x],
            action: vec![0.0],
            reward: x,
            next_state: vec![x + 1.0],
            done,
            done_is_timeout: false,
        }
    }

    fn buffer_with_episodes(lengths: &[usize], capacity: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(capacity, 1, 1).unwrap();
        let mut x = 0.0;
        for &len in lengths {
            for i in 0..len {
                b.push(tr(x, i + 1 == len)).unwrap();
                x += 1.0;
            }
        }
        b
    }

    #[test]
    fn push_grows_then_evicts_oldest() {
        let mut b = ReplayBuffer::new(3, 1, 1).unwrap();
        b.push(tr(0.0, false)).unwrap();
        assert_eq!(b.len(), 1);
        for i in 1..4 {
            b.push(tr(i as f64, false)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert!(b.get(0).is_none());
        assert_eq!(b.get(1).unwrap().reward, 1.0);
        assert_eq!(b.get(3).unwrap().reward, 3.0);
    }

    #[test]
    fn push_rejects_wrong_dims() {
        let mut b = ReplayBuffer::new(3, 2, 1).unwrap();
        assert!(matches!(b.push(tr(0.0, false)), Err(ReplayError::Dimension(_))));
        let mut bad = tr(0.0, false);
        bad.reward = f64::NAN;
        let mut b1 = ReplayBuffer::new(3, 1, 1).unwrap();
        assert!(b1.push(bad).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = ReplayBuffer::new(4, 1, 1).unwrap();
        assert!(matches!(empty.sample_uniform(3, &mut rng), Err(ReplayError::Empty)));
        assert!(empty.sample_uniform(0, &mut rng).unwrap().is_empty());
        let one = buffer_with_episodes(&[1], 4);
        let batch = one.sample_uniform(10, &mut rng).unwrap();
        assert!(batch.rewards.iter().all(|r| *r == 0.0));
        assert!(batch.not_done.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let b = buffer_with_episodes(&[50, 50], 1000);
        let a1 = b.sample_uniform(32, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let a2 = b.sample_uniform(32, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        // 20 cells, 40_000 draws interleaved with pushes after the buffer is full
        let mut b = ReplayBuffer::new(20, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..20 {
            b.push(tr(i as f64, false)).unwrap();
        }
        let mut counts = [0usize; 20];
        let mut total = 0;
        for round in 0..400 {
            let batch = b.sample_uniform(100, &mut rng).unwrap();
            for seq in &batch.sequence_ids {
                counts[(seq - b.oldest_seq()) as usize] += 1;
                total += 1;
            }
            b.push(tr(20.0 + round as f64, false)).unwrap();
        }
        let expected = total as f64 / 20.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 19 degrees of freedom, 99.9% quantile
        assert!(chi2 < 43.82, "chi² = {chi2}");
    }

    #[test]
    fn consecutive_sampling_single_episode() {
        let b = buffer_with_episodes(&[3], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs = b.sample_consecutive(5, 3, &mut rng).unwrap();
        for (k, step) in seqs.steps.iter().enumerate() {
            assert!(step.rewards.iter().all(|r| *r == k as f64));
        }
    }

    #[test]
    fn consecutive_sampling_unavailable_for_short_episodes() {
        let b = buffer_with_episodes(&[2, 2, 2, 1], 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            b.sample_consecutive(4, 3, &mut rng),
            Err(ReplayError::SequenceUnavailable(3))
        ));
    }

    #[test]
    fn consecutive_sequences_pass_index_audit() {
        let b = buffer_with_episodes(&[5, 2, 7, 3, 1, 4], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs = b.sample_consecutive(200, 3, &mut rng).unwrap();
        for i in 0..200 {
            let ids: Vec<u64> = seqs.steps.iter().map(|s| s.sequence_ids[i]).collect();
            assert_eq!(ids[1], ids[0] + 1);
            assert_eq!(ids[2], ids[1] + 1);
            let ep = b.episode_of(ids[0]).unwrap();
            assert!(ids.iter().all(|&s| b.episode_of(s) == Some(ep)));
            // each state is the previous next_state
            assert_eq!(seqs.steps[1].states.row(i), seqs.steps[0].next_states.row(i));
        }
    }

    #[test]
    fn serialization_round_trips() {
        let b = buffer_with_episodes(&[3, 4], 5);
        let back = ReplayBuffer::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back, b);
        let mut out = Vec::new();
        b.dump_ndjson(&mut out).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 5);
        let first: Transition = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first, b.get(b.oldest_seq()).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sequences_never_straddle_boundaries(
            lengths in prop::collection::vec(1usize..8, 1..40),
            capacity in 5usize..60,
            seed in 0u64..10_000,
        ) {
            let b = buffer_with_episodes(&lengths, capacity);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match b.sample_consecutive(64, 3, &mut rng) {
                Ok(seqs) => {
                    for i in 0..64 {
                        let first = seqs.steps[0].sequence_ids[i];
                        prop_assert!(b.is_sequence_start(first, 3));
                        for k in 0..3 {
                            prop_assert_eq!(seqs.steps[k].sequence_ids[i], first + k as u64);
                            prop_assert_eq!(seqs.steps[k].states.cols(), 1);
                        }
                    }
                }
                Err(ReplayError::SequenceUnavailable(_)) => {
                    let oldest = b.oldest_seq();
                    prop_assert!((oldest..oldest + b.len() as u64).all(|s| !b.is_sequence_start(s, 3)));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
