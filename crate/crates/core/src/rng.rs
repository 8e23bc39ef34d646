//! Seed derivation. Every stochastic choice in a run is drawn from a
//! generator whose seed is derived from the master seed and a stream label,
//! so results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `stream` from `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15))
        ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Sub-seed keyed by a text label, e.g. `"partition"` or `"scenario"`.
pub fn derive_seed_str(master: u64, label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(master, h)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
