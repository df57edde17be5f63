//! Seed derivation.
//!
//! Every random draw in a simulation comes from its own ChaCha stream whose
//! seed is a pure function of the master seed and a tuple of labels, so that
//! client work can run in any order (or in parallel) without changing a bit.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream labels used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    Init = 3,
    Participation = 4,
    Train = 5,
    Noise = 6,
    Shares = 7,
    Topology = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream label and two indices (usually round and
/// client) into an independent 64-bit seed.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master ^ 0x6A09_E667_F3BC_C908);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha20Rng {
    rng_from_seed(derive_seed(master, stream, a, b))
}
