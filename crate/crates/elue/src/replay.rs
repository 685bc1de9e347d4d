//! Per-task experience storage and the two sampling streams the losses use:
//! random context sets for belief inference and target tuples for the
//! Bellman/actor terms, with one context shared across several targets.

use std::collections::VecDeque;

use rand::Rng;

use crate::envsim::Transition;
use crate::{Error, Result};

/// Default ring-buffer capacity per task.
pub const DEFAULT_CAPACITY: usize = 100_000;
/// Default bounds for the random context size k.
pub const DEFAULT_K_MIN: usize = 4;
pub const DEFAULT_K_MAX: usize = 64;
/// Default number of target tuples sharing one context.
pub const DEFAULT_TARGETS_PER_CONTEXT: usize = 16;

/// FIFO ring buffer of transitions for one task.
#[derive(Clone, Debug)]
pub struct TaskBuffer {
    pub task_id: u64,
    capacity: usize,
    items: VecDeque<Transition>,
    insertion_count: u64,
}

impl TaskBuffer {
    pub fn new(task_id: u64, capacity: usize) -> Self {
        TaskBuffer {
            task_id,
            capacity,
            items: VecDeque::new(),
            insertion_count: 0,
        }
    }

    pub fn with_default_capacity(task_id: u64) -> Self {
        Self::new(task_id, DEFAULT_CAPACITY)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of adds, independent of eviction.
    pub fn insertion_count(&self) -> u64 {
        self.insertion_count
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn contains(&self, t: &Transition) -> bool {
        self.items.iter().any(|x| x == t)
    }

    /// Append a transition, evicting the oldest when full.
    pub fn add(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.insertion_count += 1;
    }

    /// Rebuild a buffer from persisted state (checkpoint loading).
    pub fn restore_empty(task_id: u64, capacity: usize, insertion_count: u64) -> Self {
        TaskBuffer {
            task_id,
            capacity,
            items: VecDeque::new(),
            insertion_count,
        }
    }

    /// Append without counting as a new insertion; pairs with `restore_empty`.
    pub fn push_restored(&mut self, t: Transition) {
        self.items.push_back(t);
    }

    /// Draw a context: k ~ Uniform{k_min..k_max} clamped to the buffer size,
    /// then k tuples uniformly with replacement.
    pub fn sample_context(
        &self,
        k_min: usize,
        k_max: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Transition>> {
        if self.items.len() < k_min {
            return Err(Error::Replay(format!(
                "task {} buffer holds {} transitions but k_min is {k_min}; collect more data first",
                self.task_id,
                self.items.len()
            )));
        }
        let k = rng.random_range(k_min..=k_max).min(self.items.len());
        let mut ctx = Vec::with_capacity(k);
        for _ in 0..k {
            let idx = rng.random_range(0..self.items.len());
            ctx.push(self.items[idx]);
        }
        Ok(ctx)
    }

    /// Draw `targets` tuples uniformly with replacement, independent of any
    /// context.
    pub fn sample_targets(&self, targets: usize, rng: &mut impl Rng) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::Replay(format!("task {} buffer is empty", self.task_id)));
        }
        let mut out = Vec::with_capacity(targets);
        for _ in 0..targets {
            let idx = rng.random_range(0..self.items.len());
            out.push(self.items[idx]);
        }
        Ok(out)
    }

    /// One context plus `targets` independent target tuples; the same
    /// context serves all of them.
    pub fn sample_batch(
        &self,
        targets: usize,
        k_min: usize,
        k_max: usize,
        rng: &mut impl Rng,
    ) -> Result<ContextBatch> {
        let context = self.sample_context(k_min, k_max, rng)?;
        let targets = self.sample_targets(targets, rng)?;
        Ok(ContextBatch {
            task_id: self.task_id,
            context,
            targets,
        })
    }
}

/// A context set and the target tuples that share it.
#[derive(Clone, Debug)]
pub struct ContextBatch {
    pub task_id: u64,
    pub context: Vec<Transition>,
    pub targets: Vec<Transition>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn t(v: f64) -> Transition {
        Transition {
            state: [v, 0.0],
            action: [0.0, 0.0],
            reward: -v,
            next_state: [v, v],
        }
    }

    #[test]
    fn add_and_fifo_eviction() {
        let mut buf = TaskBuffer::new(0, 3);
        buf.add(t(1.0));
        assert_eq!(buf.len(), 1);
        for i in 2..=4 {
            buf.add(t(i as f64));
        }
        assert_eq!(buf.len(), 3);
        assert!(!buf.contains(&t(1.0)), "oldest item must be evicted");
        assert!(buf.contains(&t(4.0)));
        assert_eq!(buf.insertion_count(), 4);
    }

    #[test]
    fn degenerate_buffer_samples_with_replacement() {
        let mut buf = TaskBuffer::new(0, 10);
        buf.add(t(7.0));
        let mut rng = StdRng::seed_from_u64(0);
        let ctx = buf.sample_context(1, 8, &mut rng).unwrap();
        assert!(!ctx.is_empty());
        assert!(ctx.iter().all(|c| c == &t(7.0)));
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mut buf = TaskBuffer::new(0, 100);
        for i in 0..50 {
            buf.add(t(i as f64));
        }
        let a = buf
            .sample_context(4, 16, &mut StdRng::seed_from_u64(3))
            .unwrap();
        let b = buf
            .sample_context(4, 16, &mut StdRng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_smaller_than_k_min_errors() {
        let mut buf = TaskBuffer::new(0, 100);
        buf.add(t(0.0));
        let err = buf
            .sample_context(4, 16, &mut StdRng::seed_from_u64(0))
            .unwrap_err();
        assert!(err.to_string().contains("collect more data"));
    }

    #[test]
    fn empirical_mean_of_k_matches_uniform_law() {
        // Direct simulation of k ~ Uniform{4..64}: mean should be ~34.
        let mut buf = TaskBuffer::new(0, 200);
        for i in 0..100 {
            buf.add(t(i as f64));
        }
        let mut rng = StdRng::seed_from_u64(12);
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += buf.sample_context(4, 64, &mut rng).unwrap().len() as f64;
        }
        let mean = acc / n as f64;
        assert!((mean - 34.0).abs() < 1.0, "mean k = {mean}");
    }

    #[test]
    fn batch_structure() {
        let mut buf = TaskBuffer::new(3, 100);
        for i in 0..40 {
            buf.add(t(i as f64));
        }
        let mut rng = StdRng::seed_from_u64(5);
        let batch = buf.sample_batch(1, 4, 16, &mut rng).unwrap();
        assert_eq!(batch.targets.len(), 1);
        assert_eq!(batch.task_id, 3);
        let batch = buf.sample_batch(16, 4, 16, &mut rng).unwrap();
        assert!(batch.targets.iter().all(|x| buf.contains(x)));
        assert!(batch.context.iter().all(|x| buf.contains(x)));
    }

    #[test]
    fn different_seeds_give_different_targets() {
        // With a large buffer, the probability of identical target draws is
        // vanishing; check a handful of seed pairs.
        let mut buf = TaskBuffer::new(0, 10_000);
        for i in 0..5_000 {
            buf.add(t(i as f64));
        }
        let mut differing = 0;
        for s in 0..5u64 {
            let a = buf
                .sample_batch(16, 4, 16, &mut StdRng::seed_from_u64(s))
                .unwrap();
            let b = buf
                .sample_batch(16, 4, 16, &mut StdRng::seed_from_u64(s + 100))
                .unwrap();
            if a.targets != b.targets {
                differing += 1;
            }
        }
        assert_eq!(differing, 5);
    }

    #[test]
    fn sampling_does_not_mutate_the_buffer() {
        let mut buf = TaskBuffer::new(0, 100);
        for i in 0..30 {
            buf.add(t(i as f64));
        }
        let before: Vec<Transition> = buf.iter().copied().collect();
        let mut rng = StdRng::seed_from_u64(1);
        let _ = buf.sample_batch(8, 4, 16, &mut rng).unwrap();
        let after: Vec<Transition> = buf.iter().copied().collect();
        assert_eq!(before, after);
        assert_eq!(buf.insertion_count(), 30);
    }
}
