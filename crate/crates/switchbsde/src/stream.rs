//! Counter-based random-number substreams.
//!
//! Every sampling operation draws from a stream derived as
//! `hash(seed, index, purpose)`, so a scenario's randomness is a pure
//! function of its index: parallel scheduling, worker counts, or the order
//! in which scenarios are generated never change the draws.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// What a substream is consumed for. Distinct purposes on the same
/// (seed, index) are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Brownian,
    PoissonCount,
    PoissonTimes,
    PoissonMarks,
    ModeSample,
    Validation,
    Thinning,
    Generic(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Brownian => 1,
            Purpose::PoissonCount => 2,
            Purpose::PoissonTimes => 3,
            Purpose::PoissonMarks => 4,
            Purpose::ModeSample => 5,
            Purpose::Validation => 6,
            Purpose::Thinning => 7,
            Purpose::Generic(t) => 0x100 + t,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the substream for (seed, scenario index, purpose).
pub fn substream(seed: u64, index: u64, purpose: Purpose) -> ChaCha12Rng {
    let mut state = seed
        ^ index.wrapping_mul(0xa076_1d64_78bd_642f)
        ^ purpose.tag().wrapping_mul(0xe703_7ed1_a0b4_28db);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
