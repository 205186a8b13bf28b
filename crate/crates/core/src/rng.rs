//! Hierarchically labeled random streams.
//!
//! A root seed spawns child streams by label path (round -> client -> local
//! step, plus a separate participation stream). A stream depends only on its
//! path, never on how many draws other streams consumed, so twin runs and
//! parallel clients see identical randomness regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used by the engine and probes.
pub mod label {
    pub const INIT: u64 = 0x1;
    pub const ROUND: u64 = 0x2;
    pub const PARTICIPATION: u64 = 0x3;
    pub const CLIENT: u64 = 0x4;
    pub const LOCAL_STEP: u64 = 0x5;
    pub const DATA: u64 = 0x10;
    pub const PARTITION: u64 = 0x11;
    pub const NEIGHBOR: u64 = 0x12;
    pub const TEST_SET: u64 = 0x13;
    pub const PROBE: u64 = 0x20;
    pub const REPLICATE: u64 = 0x21;
    pub const SMOOTHNESS: u64 = 0x22;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stream(u64);

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream(splitmix64(seed ^ 0x5EED_0F_FED5_7AB1))
    }

    pub fn child(self, label: u64) -> Self {
        Stream(splitmix64(self.0 ^ splitmix64(label.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    /// Shorthand for `child(label).child(index)`.
    pub fn indexed(self, label: u64, index: u64) -> Self {
        self.child(label).child(index)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}
