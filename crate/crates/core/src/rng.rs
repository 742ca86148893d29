//! Counter-based stream derivation: every random stream is a pure function of
//! the run seed and a tuple of counters, so results do not depend on the order
//! in which instances or chains are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains, kept distinct so that e.g. chain initialisation and chain
/// updates never share randomness.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    ChainInit = 1,
    ChainUpdate = 2,
    Shuffle = 3,
    ParamInit = 4,
    AuxFantasy = 5,
    Prediction = 6,
    Data = 7,
    Noise = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, domain: Domain, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(domain as u64));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x51_7CC1_B727_220A)));
    }
    h
}

pub fn stream(seed: u64, domain: Domain, counters: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, counters))
}
