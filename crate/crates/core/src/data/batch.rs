use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;

/// Shuffled mini-batch partition of `0..n` for one epoch. The final short
/// batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Iterates over the mini-batches of one epoch.
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(samples: &'a [Sample], batch_size: usize, seed: u64, epoch: usize) -> Self {
        Self {
            samples,
            batches: batch_indices(samples.len(), batch_size, seed, epoch).into_iter(),
        }
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<&'a Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches
            .next()
            .map(|idx| idx.into_iter().map(|i| &self.samples[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_partition() {
        let b = batch_indices(33, 16, 5, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [16, 16, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order() {
        assert_eq!(batch_indices(40, 8, 3, 2), batch_indices(40, 8, 3, 2));
        assert_ne!(batch_indices(40, 8, 3, 2), batch_indices(40, 8, 3, 3));
    }
}
