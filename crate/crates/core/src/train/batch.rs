use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::rng::derive_seed_indexed;

/// Maps a global step to batch indices, deterministically from the seed.
///
/// Unlabeled data is visited once per epoch in a fresh permutation; labeled
/// data is an endless stream of permutations, cycled as needed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
}

fn permutation(n: usize, seed: u64, label: &str, index: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, label, index));
    idx.shuffle(&mut rng);
    idx
}

impl BatchSampler {
    /// `ceil(|U| / b_u)` when unlabeled data is used, else `ceil(|L| / b_l)`.
    pub fn iters_per_epoch(&self) -> usize {
        if self.n_unlabeled > 0 && self.batch_unlabeled > 0 {
            self.n_unlabeled.div_ceil(self.batch_unlabeled)
        } else {
            self.n_labeled.div_ceil(self.batch_labeled.max(1)).max(1)
        }
    }

    pub fn labeled(&self, step: usize) -> Vec<usize> {
        let n = self.n_labeled;
        if n == 0 {
            return Vec::new();
        }
        let start = step * self.batch_labeled;
        let mut cycle = usize::MAX;
        let mut perm = Vec::new();
        (start..start + self.batch_labeled)
            .map(|pos| {
                if pos / n != cycle {
                    cycle = pos / n;
                    perm = permutation(n, self.seed, "labeled-cycle", cycle as u64);
                }
                perm[pos % n]
            })
            .collect()
    }

    /// The last batch of an epoch wraps to the start of the same permutation
    /// so every batch has full size.
    pub fn unlabeled(&self, step: usize) -> Vec<usize> {
        let n = self.n_unlabeled;
        if n == 0 || self.batch_unlabeled == 0 {
            return Vec::new();
        }
        let ipe = self.iters_per_epoch();
        let perm = permutation(n, self.seed, "unlabeled-epoch", (step / ipe) as u64);
        let start = (step % ipe) * self.batch_unlabeled;
        (start..start + self.batch_unlabeled).map(|p| perm[p % n]).collect()
    }
}
