//! Counter-based random substreams.
//!
//! Every random draw in the crate descends from one `u64` scenario seed. A
//! substream is addressed by a name and an index (for example the time-slice
//! number), so the same slice always sees the same numbers no matter which
//! thread runs it or in which order slices are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root of all randomness for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(name, index)`.
    ///
    /// The ChaCha key is derived from the seed and the name; the index selects
    /// the ChaCha stream, so substreams never overlap.
    pub fn substream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, fnv1a(name)));
        rng.set_stream(index);
        rng
    }

    /// Stateless 64-bit draw for `(name, a, b)`; used where a full generator
    /// per event would be wasteful (one QRNG decision per tick).
    pub fn hash(&self, name: &str, a: u64, b: u64) -> u64 {
        mix(mix(mix(self.seed, fnv1a(name)), a), b)
    }

    /// Uniform draw in `[0, 1)` derived from [`SeedTree::hash`].
    pub fn unit(&self, name: &str, a: u64, b: u64) -> f64 {
        (self.hash(name, a, b) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer applied to a combination of two words
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
