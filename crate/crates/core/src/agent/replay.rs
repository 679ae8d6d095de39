//! Experience replay restricted to successful trips.
//!
//! The buffer is a fixed-capacity ring with uniform sampling. Episodes are
//! staged by the caller and offered whole; only goal-reaching trips are
//! admitted, so every stored transition comes from a trajectory that ended
//! inside the terminal constraint set. Each push re-audits the invariants
//! (nonnegative costs, exactly one terminal transition at the end).

use rand::Rng;

use crate::powertrain::ControlInput;
use crate::traffic::{EpisodeStatus, Observation};

/// One step of experience: observation, applied torques (physical N·m),
/// realized stage cost, successor observation, and whether the successor is
/// terminal (no bootstrapping past it).
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub action: ControlInput,
    pub cost: f64,
    pub next_obs: Observation,
    pub terminal: bool,
}

/// Why an offered episode was rejected.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PushError {
    #[error("episode status {0} is not goal_reached")]
    NotSuccessful(EpisodeStatus),
    #[error("episode transition {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    head: usize,
    capacity: usize,
    episodes_accepted: usize,
    episodes_rejected: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            data: Vec::new(),
            head: 0,
            capacity,
            episodes_accepted: 0,
            episodes_rejected: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes_accepted(&self) -> usize {
        self.episodes_accepted
    }

    pub fn episodes_rejected(&self) -> usize {
        self.episodes_rejected
    }

    fn audit(episode: &[Transition]) -> Result<(), PushError> {
        let last = episode.len() - 1;
        for (i, tr) in episode.iter().enumerate() {
            if !(tr.cost >= 0.0) {
                return Err(PushError::Malformed {
                    index: i,
                    reason: format!("negative or NaN cost {}", tr.cost),
                });
            }
            if tr.terminal != (i == last) {
                return Err(PushError::Malformed {
                    index: i,
                    reason: "terminal flag must mark exactly the final transition".into(),
                });
            }
        }
        Ok(())
    }

    /// Offers a finished episode. Only `GoalReached` trips are stored; any
    /// other status leaves the buffer untouched and counts as a rejection.
    pub fn push_episode(
        &mut self,
        episode: Vec<Transition>,
        status: EpisodeStatus,
    ) -> Result<usize, PushError> {
        if status != EpisodeStatus::GoalReached {
            self.episodes_rejected += 1;
            return Err(PushError::NotSuccessful(status));
        }
        if episode.is_empty() {
            self.episodes_rejected += 1;
            return Err(PushError::Malformed { index: 0, reason: "empty episode".into() });
        }
        if let Err(e) = Self::audit(&episode) {
            self.episodes_rejected += 1;
            return Err(e);
        }
        let n = episode.len();
        for tr in episode {
            if self.data.len() < self.capacity {
                self.data.push(tr);
            } else {
                self.data[self.head] = tr;
            }
            self.head = (self.head + 1) % self.capacity;
        }
        self.episodes_accepted += 1;
        Ok(n)
    }

    /// Uniform sample of `n` transition indices (with replacement).
    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..n).map(|_| rng.gen_range(0..self.data.len())).collect()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}
