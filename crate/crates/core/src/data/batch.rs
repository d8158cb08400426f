use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Instance};

/// A borrowed mini-batch. Scenarios may be mixed; routing happens in the model.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub instances: Vec<&'a Instance>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.instances.iter().map(|i| i.label as f64).collect()
    }
}

impl Dataset {
    /// Splits the dataset into batches of `batch_size` (the last may be
    /// short). With a seed the visit order is a seeded permutation; without
    /// one it is file order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Batch<'_>> {
        batch_indices(self.len(), batch_size, shuffle_seed)
            .into_iter()
            .map(|idx| Batch {
                instances: idx.into_iter().map(|i| &self.instances()[i]).collect(),
            })
            .collect()
    }
}

/// Index form of [`Dataset::batches`]. Panics if `batch_size == 0`.
pub fn batch_indices(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
