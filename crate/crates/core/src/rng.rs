//! Keyed, platform-independent random streams.
//!
//! Every random decision in the toolkit draws from a [`RngStream`]: a
//! `(seed, stream_id)` pair that maps onto a ChaCha8 keystream. Child streams
//! are derived by mixing a tag into the stream id, so two components that
//! derive different tags never share draws, and re-deriving the same tag
//! always replays the same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Tags for the child streams used by the library. Kept in one place so two
/// modules never pick the same tag by accident.
pub mod tags {
    pub const INIT: u64 = 0x1001;
    pub const MINIBATCH: u64 = 0x1002;
    pub const OBJECTIVE_NOISE: u64 = 0x1003;
    pub const PARTITION: u64 = 0x2001;
    pub const SHARD_SLICE: u64 = 0x2002;
    pub const DARE_TREE: u64 = 0x3001;
    pub const FISHER_NOISE: u64 = 0x4001;
    pub const DELTAGRAD_NOISE: u64 = 0x5001;
    pub const D2D_REQUEST: u64 = 0x6001;
    pub const BLOCK: u64 = 0x7001;
    pub const BACKDOOR: u64 = 0x8001;
    pub const SYNTHETIC: u64 = 0x9001;
    pub const DELETION: u64 = 0x9002;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub const fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    /// Child stream keyed by `tag`.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag)),
        }
    }

    /// Child stream keyed by a sequence of tags, e.g. `(shard, slice)`.
    pub fn derive_path(&self, path: &[u64]) -> Self {
        path.iter().fold(*self, |s, &t| s.derive(t))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| standard_normal(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_keys_replay() {
        let s = RngStream::new(42, 7);
        let a: Vec<u64> = (0..16).map(|_| s.rng().random()).collect();
        let mut r1 = s.rng();
        let mut r2 = s.rng();
        let b: Vec<u64> = (0..16).map(|_| r1.random()).collect();
        let c: Vec<u64> = (0..16).map(|_| r2.random()).collect();
        assert_eq!(b, c);
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn derived_streams_differ() {
        let s = RngStream::from_seed(1);
        let a: u64 = s.derive(1).rng().random();
        let b: u64 = s.derive(2).rng().random();
        assert_ne!(a, b);
        assert_eq!(s.derive_path(&[3, 4]), s.derive(3).derive(4));
    }

    #[test]
    fn known_first_draw_is_stable() {
        const PINNED: u64 = 13080132717333068652;
        // Pins the keystream so a dependency bump that changes it is noticed.
        let first: u64 = RngStream::new(0, 0).rng().random();
        assert_eq!(first, PINNED);
    }
}
