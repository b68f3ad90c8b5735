//! Counter-based hierarchical random streams.
//!
//! A [`Stream`] is a ChaCha8 keystream identified by a 64-bit key and a 64-bit
//! stream id. Children are derived without touching the parent's position:
//! all children of one parent share a freshly mixed key and use the child
//! label as the ChaCha stream id, so siblings are distinct keystreams for every
//! label in `0..2^64`. That is what makes replica fan-out reproducible
//! independent of thread count: replica `i` always reads the same bits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. A bijection on `u64`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sweep point `index` of a run seeded with `seed`.
///
/// `splitmix64(seed ^ index)`: distinct indices give distinct seeds because
/// both the xor and the finalizer are bijections.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index)
}

#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    id: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    /// Root stream for a run.
    pub fn new(seed: u64) -> Self {
        Self::keyed(splitmix64(seed ^ 0x6776_752d_6c61_6221), 0)
    }

    fn keyed(key: u64, id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(id);
        Self { key, id, rng }
    }

    /// Child stream `label`. Independent of how much of `self` was consumed.
    pub fn child(&self, label: u64) -> Self {
        let key =
            splitmix64(splitmix64(self.key) ^ self.id.rotate_left(17) ^ 0xA076_1D64_78BD_642F);
        Self::keyed(key, label)
    }

    /// Child stream named by a string, e.g. `"replica"` or `"junk"`.
    pub fn named(&self, name: &str) -> Self {
        self.child(fnv1a64(name.as_bytes()))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
