//! Seed discipline.
//!
//! One global seed feeds every random draw. A purpose tag and an index pick
//! a ChaCha8 stream: the key is the 64-bit seed and the stream id is
//! `(purpose << 40) | index`. Streams never overlap, so adding draws for one
//! purpose (say, more evaluation samples) leaves every other purpose's
//! numbers untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    Training = 3,
    Sampling = 4,
    Erasure = 5,
    Eval = 6,
    Heldout = 7,
    Baseline = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, purpose: Purpose, index: u64) -> Rng {
        assert!(index < 1 << 40, "stream index out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 40) | index);
        rng
    }

    /// A 64-bit seed drawn from a purpose stream, for handing to APIs that
    /// take a plain seed.
    pub fn derive(&self, purpose: Purpose, index: u64) -> u64 {
        use rand::RngCore;
        self.rng(purpose, index).next_u64()
    }
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl rand::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
