use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffled mini-batches over `0..n`, reshuffling once fewer than `batch_size`
/// indices remain (the short tail of each pass is dropped).
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0 && batch_size <= n, "batch size must lie in 1..=n");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            batch_size,
            rng,
        }
    }

    /// Full batches per pass, `⌊n / B⌋`.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_pass_visits_distinct_indices() {
        let mut s = BatchSampler::new(10, 3, 1);
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = BatchSampler::new(50, 7, 3);
        let mut b = BatchSampler::new(50, 7, 3);
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
