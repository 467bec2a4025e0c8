//! Deterministic random-stream derivation.
//!
//! Every stochastic routine in this crate takes a [`Seeder`] rather than a
//! shared generator. A seeder is a 64-bit key; child keys are derived by
//! mixing the parent key with a label, and each leaf key seeds an
//! independent [`StreamRng`]. Per-particle work draws from the stream
//! `seeder.child(step).child(particle)`, so results do not depend on the
//! order (or the thread) in which particles are processed.
//!
//! Derivation: `child(k) = splitmix64(key ^ splitmix64(k + GOLDEN))`,
//! `named(s) = child(fnv1a64(s))`. A leaf stream is
//! `ChaCha8Rng::seed_from_u64(key)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every leaf stream.
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A node in the tree of random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seeder(u64);

impl Seeder {
    pub fn new(master_seed: u64) -> Self {
        Seeder(splitmix64(master_seed))
    }

    pub fn key(&self) -> u64 {
        self.0
    }

    /// Child node for an integer label (step, particle, iteration, ...).
    pub fn child(&self, label: u64) -> Self {
        Seeder(splitmix64(self.0 ^ splitmix64(label.wrapping_add(GOLDEN))))
    }

    /// Child node for a string label.
    pub fn named(&self, label: &str) -> Self {
        self.child(fnv1a64(label))
    }

    /// Generator for this node.
    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }
}
