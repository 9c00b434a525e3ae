use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Epoch-based batch sampler, without replacement within an epoch.
///
/// Each epoch shuffles every subject's windows and the subject order, then
/// deals them round-robin so that consecutive windows come from different
/// subjects; batches are consecutive slices of that order. A short final
/// batch is topped up from the start of the same epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSampler {
    groups: BTreeMap<i32, Vec<usize>>,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `subjects[i]` is the subject of window `indices[i]`.
    pub fn new(indices: &[usize], subjects: &[i32], batch_size: usize, seed: u64) -> Self {
        let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (&i, &s) in indices.iter().zip(subjects) {
            groups.entry(s).or_default().push(i);
        }
        let total = indices.len();
        Self {
            groups,
            batch_size: batch_size.clamp(1, total.max(1)),
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Iterations per epoch: `ceil(n / batch)`.
    pub fn batches_per_epoch(&self) -> usize {
        self.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut subjects: Vec<i32> = self.groups.keys().copied().collect();
        subjects.shuffle(&mut self.rng);
        let mut queues: Vec<Vec<usize>> = subjects
            .iter()
            .map(|s| {
                let mut q = self.groups[s].clone();
                q.shuffle(&mut self.rng);
                q
            })
            .collect();
        let mut order = Vec::with_capacity(self.len());
        let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..longest {
            for q in &mut queues {
                if let Some(&i) = q.get(k) {
                    order.push(i);
                }
            }
        }
        self.order = order;
        self.pos = 0;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let mut batch = self.order[self.pos..end].to_vec();
        let short = self.batch_size - batch.len();
        batch.extend_from_slice(&self.order[..short]);
        self.pos = end;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn epoch_covers_everything() {
        let idx: Vec<usize> = (0..23).collect();
        let subj: Vec<i32> = idx.iter().map(|i| (i % 3) as i32).collect();
        let mut s = BatchSampler::new(&idx, &subj, 5, 1);
        assert_eq!(s.batches_per_epoch(), 5);
        let mut seen = BTreeSet::new();
        for _ in 0..5 {
            let b = s.next_batch();
            assert_eq!(b.len(), 5);
            seen.extend(b);
        }
        assert_eq!(seen.len(), 23);
        assert_eq!(s.epoch(), 1);
        s.next_batch();
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn batches_mix_subjects() {
        let idx: Vec<usize> = (0..40).collect();
        let subj: Vec<i32> = idx.iter().map(|&i| if i < 20 { 1 } else { 2 }).collect();
        let mut s = BatchSampler::new(&idx, &subj, 8, 4);
        for _ in 0..5 {
            let b = s.next_batch();
            let ones = b.iter().filter(|&&i| i < 20).count();
            assert_eq!(ones, 4);
        }
    }

    #[test]
    fn deterministic_and_serializable() {
        let idx: Vec<usize> = (0..10).collect();
        let subj = vec![0; 10];
        let mut a = BatchSampler::new(&idx, &subj, 3, 9);
        a.next_batch();
        let mut b: BatchSampler = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        for _ in 0..7 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
