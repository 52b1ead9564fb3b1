//! Named random streams derived from a single master seed.
//!
//! Every consumer of randomness (weight init, dropout masks, batch
//! shuffling, bootstrap draws, ...) asks for its own stream by name, so
//! adding draws in one subsystem never shifts another subsystem's values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str) -> u64 {
        splitmix64(self.master ^ fnv1a(name.as_bytes()))
    }

    pub fn seed_indexed(&self, name: &str, index: u64) -> u64 {
        splitmix64(self.seed(name) ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
    }

    pub fn child(&self, name: &str) -> SeedStream {
        SeedStream::new(self.seed(name))
    }

    pub fn rng(&self, name: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.seed(name))
    }

    pub fn rng_indexed(&self, name: &str, index: u64) -> StreamRng {
        StreamRng::seed_from_u64(self.seed_indexed(name, index))
    }
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
