//! Seeded randomness.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] derived
//! from a single 64-bit root seed. A stream is identified by a static label
//! and an index; the pair is hashed into the ChaCha stream id, so two
//! different (label, index) pairs never share a keystream and adding a new
//! consumer never perturbs the draws of an existing one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Root of the stream tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Independent generator for `(label, index)`.
    pub fn stream(&self, label: &str, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(stream_id(label, index));
        rng
    }

    /// A child tree, e.g. one per experiment seed or per worker.
    pub fn child(&self, label: &str, index: u64) -> Streams {
        let mut rng = self.stream(label, index);
        Streams { root: rng.random() }
    }
}

fn stream_id(label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then a splitmix64 finaliser mixing in the index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h ^ splitmix64(index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in the half-open interval `[0, 1)`.
pub fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniformly random permutation of `0..n` (Fisher-Yates).
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}
