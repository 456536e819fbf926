//! Replay buffer of every example seen so far.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StreamError;
use crate::data::{Example, LabeledBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub example: Example,
    /// Step index of the batch that delivered the example.
    pub arrival: u64,
}

/// Append-only store with uniform sampling with replacement.
///
/// `max_size` turns on oldest-first eviction; it is `None` by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<Entry>,
    item_shape: [usize; 3],
    rng: ChaCha8Rng,
    pub max_size: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(item_shape: [usize; 3], seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            item_shape,
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_size: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.item_shape
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Rebuilds a buffer from saved parts.
    pub fn from_parts(
        entries: Vec<Entry>,
        item_shape: [usize; 3],
        rng: ChaCha8Rng,
        max_size: Option<usize>,
    ) -> Self {
        Self {
            entries,
            item_shape,
            rng,
            max_size,
        }
    }

    pub fn append(&mut self, batch: &LabeledBatch, arrival: u64) {
        self.entries.extend(
            batch
                .examples()
                .into_iter()
                .map(|example| Entry { example, arrival }),
        );
        if let Some(max) = self.max_size {
            if self.entries.len() > max {
                let excess = self.entries.len() - max;
                self.entries.drain(..excess);
            }
        }
    }

    /// `n` entries drawn uniformly with replacement using the buffer's rng.
    pub fn sample_random(&mut self, n: usize) -> Result<LabeledBatch, StreamError> {
        let mut rng = self.rng.clone();
        let out = self.sample_random_with(n, None, &mut rng);
        self.rng = rng;
        out
    }

    /// Like [`sample_random`](Self::sample_random) with an explicit rng.
    /// Entries that arrived at step `exclude` are skipped unless nothing
    /// else is stored.
    pub fn sample_random_with<R: RngCore>(
        &self,
        n: usize,
        exclude: Option<u64>,
        rng: &mut R,
    ) -> Result<LabeledBatch, StreamError> {
        if self.entries.is_empty() {
            return Err(StreamError::EmptyBuffer);
        }
        let pool: Vec<&Entry> = match exclude {
            Some(step) if self.entries.iter().any(|e| e.arrival != step) => {
                self.entries.iter().filter(|e| e.arrival != step).collect()
            }
            _ => self.entries.iter().collect(),
        };
        let picks: Vec<&Example> = (0..n)
            .map(|_| &pool[rng.gen_range(0..pool.len())].example)
            .collect();
        Ok(LabeledBatch::from_examples(picks, self.item_shape))
    }

    /// Every stored example as one batch.
    pub fn all(&self) -> LabeledBatch {
        LabeledBatch::from_examples(self.entries.iter().map(|e| &e.example), self.item_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn batch(start: usize, n: usize) -> LabeledBatch {
        let exs: Vec<Example> = (start..start + n)
            .map(|i| Example {
                input: vec![i as f64],
                partner: None,
                label: i,
            })
            .collect();
        LabeledBatch::from_examples(&exs, [1, 1, 1])
    }

    #[test]
    fn appends_keep_earlier_entries() {
        let mut b = ReplayBuffer::new([1, 1, 1], 0);
        assert!(matches!(b.sample_random(1), Err(StreamError::EmptyBuffer)));
        b.append(&batch(0, 10), 0);
        assert_eq!(b.len(), 10);
        for j in 1..3 {
            b.append(&batch(10 * j as usize, 10), j);
        }
        assert_eq!(b.len(), 30);
        assert_eq!(
            b.entries()[..10]
                .iter()
                .map(|e| e.example.clone())
                .collect::<Vec<_>>(),
            batch(0, 10).examples()
        );
    }

    #[test]
    fn singleton_buffer_repeats_its_entry() {
        let mut b = ReplayBuffer::new([1, 1, 1], 0);
        b.append(&batch(7, 1), 0);
        let s = b.sample_random(4).unwrap();
        assert_eq!(s.labels, vec![7; 4]);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn samples_are_always_stored_entries() {
        let mut b = ReplayBuffer::new([1, 1, 1], 5);
        for j in 0..20u64 {
            b.append(&batch(3 * j as usize, 3), j);
            let s = b.sample_random(5).unwrap();
            assert!(s.labels.iter().all(|&l| l < 3 * (j as usize + 1)));
        }
    }

    #[test]
    fn excluding_the_current_step_falls_back_when_needed() {
        let mut b = ReplayBuffer::new([1, 1, 1], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.append(&batch(0, 2), 0);
        assert_eq!(
            b.sample_random_with(50, Some(0), &mut rng).unwrap().len(),
            50
        );
        b.append(&batch(2, 2), 1);
        let s = b.sample_random_with(50, Some(1), &mut rng).unwrap();
        assert!(s.labels.iter().all(|&l| l < 2));
    }

    #[test]
    fn eviction_drops_oldest_when_enabled() {
        let mut b = ReplayBuffer::new([1, 1, 1], 5);
        b.max_size = Some(4);
        b.append(&batch(0, 3), 0);
        b.append(&batch(3, 3), 1);
        assert_eq!(b.all().labels, vec![2, 3, 4, 5]);
    }
}
