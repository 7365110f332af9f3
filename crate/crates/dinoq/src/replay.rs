//! Fixed-capacity experience replay with uniform minibatch sampling.
//!
//! A plain ring: once full, each push overwrites the oldest record. Sampling
//! draws indices uniformly with replacement from the injected PRNG, so a
//! fixed seed reproduces the exact batch sequence.

use crate::env::Action;
use crate::raster::Observation;
use crate::rng::SplitMix64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("insufficient data: buffer holds {len}, need {need}")]
    InsufficientData { len: usize, need: usize },
}

/// One experience record. `next_action` is the greedy action at the next
/// state, recorded uniformly for every agent; only the on-policy variant
/// would consume it, and it is meaningless on terminal records.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f32,
    pub next_obs: Observation,
    pub terminal: bool,
    pub next_action: Option<Action>,
}

pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    /// Index of the oldest record once the ring is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append, evicting the oldest record once at capacity.
    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Draw `batch_size` records uniformly with replacement, in draw order.
    pub fn sample(
        &self,
        batch_size: usize,
        prng: &mut SplitMix64,
    ) -> Result<Vec<&Transition>, ReplayError> {
        if self.storage.len() < batch_size {
            return Err(ReplayError::InsufficientData {
                len: self.storage.len(),
                need: batch_size,
            });
        }
        let n = self.storage.len() as u64;
        Ok((0..batch_size)
            .map(|_| &self.storage[prng.next_below(n) as usize])
            .collect())
    }

    /// Records in storage order (not age order once the ring has wrapped).
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}
