//! Capacity-bounded replay memory with seedable uniform sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::state::TransitionTuple;

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buf: Vec<TransitionTuple>,
    capacity: usize,
    write: usize,
    rng: ChaCha12Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be >= 1");
        Self {
            buf: Vec::with_capacity(capacity.min(4096)),
            capacity,
            write: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts a tuple, evicting the oldest once at capacity.
    pub fn push(&mut self, tuple: TransitionTuple) {
        if self.buf.len() < self.capacity {
            self.buf.push(tuple);
        } else {
            self.buf[self.write] = tuple;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn get(&self, idx: usize) -> &TransitionTuple {
        &self.buf[idx]
    }

    /// Uniformly samples `amount` distinct indices. Panics if the memory
    /// holds fewer tuples than requested.
    pub fn sample_indices(&mut self, amount: usize) -> Vec<usize> {
        assert!(
            amount <= self.buf.len(),
            "cannot sample {amount} from memory of {}",
            self.buf.len()
        );
        rand::seq::index::sample(&mut self.rng, self.buf.len(), amount).into_vec()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
        self.write = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{ActionDistribution, GeneralInfoState};

    fn tuple(tag: f64) -> TransitionTuple {
        TransitionTuple {
            g: GeneralInfoState::zeros(1, 1),
            d: ActionDistribution::zeros(1, 1),
            actions: vec![vec![0.0]],
            rewards: vec![tag],
            g_next: GeneralInfoState::zeros(1, 1),
            d_next: ActionDistribution::zeros(1, 1),
            terminal: false,
        }
    }

    #[test]
    fn oldest_evicted_first() {
        let mut mem = ReplayMemory::new(3, 0);
        for k in 0..5 {
            mem.push(tuple(k as f64));
        }
        assert_eq!(mem.len(), 3);
        let tags: Vec<f64> = (0..3).map(|i| mem.get(i).rewards[0]).collect();
        // slots hold 3, 4 after wrapping over 0 and 1
        assert!(tags.contains(&2.0) && tags.contains(&3.0) && tags.contains(&4.0));
    }

    #[test]
    fn sample_returns_distinct_indices() {
        let mut mem = ReplayMemory::new(100, 1);
        for k in 0..10 {
            mem.push(tuple(k as f64));
        }
        let idx = mem.sample_indices(10);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn sampling_is_close_to_uniform() {
        // Frozen-seed statistical check: 1e5 draws over 100 tuples, every
        // index frequency within 3 sigma of uniform.
        let mut mem = ReplayMemory::new(100, 12345);
        for k in 0..100 {
            mem.push(tuple(k as f64));
        }
        let draws = 100_000usize;
        let mut counts = vec![0u32; 100];
        for _ in 0..draws {
            counts[mem.sample_indices(1)[0]] += 1;
        }
        let p = 1.0 / 100.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (idx, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - mean).abs();
            assert!(
                dev <= 3.0 * sigma,
                "index {idx} frequency {c} deviates {dev:.1} > 3 sigma ({:.1})",
                3.0 * sigma
            );
        }
    }
}
