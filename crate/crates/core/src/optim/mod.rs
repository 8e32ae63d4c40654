//! Training-loop substrate: AdamW, the warmup/decay schedule, seeded RNG
//! streams, and shuffled minibatching.

mod adamw;
mod rng;
mod schedule;

pub use adamw::{adamw_step, AdamW, AdamWConfig, AdamWState};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use schedule::LrSchedule;

use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("shape mismatch: params {params}, grads {grads}, optimizer state {state}")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("tensor count mismatch: params {params}, grads {grads}, optimizer state {state}")]
    TensorCount {
        params: usize,
        grads: usize,
        state: usize,
    },
}

/// A seeded permutation of `0..n` cut into batches of `batch_size`; the last
/// batch keeps the remainder.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_indices() {
        let b = shuffled_batches(4, 2, &mut SeededRng::new(1));
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn remainder_batch() {
        let b = shuffled_batches(5, 2, &mut SeededRng::new(3));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = shuffled_batches(37, 8, &mut SeededRng::new(9));
        let b = shuffled_batches(37, 8, &mut SeededRng::new(9));
        assert_eq!(a, b);
    }
}
