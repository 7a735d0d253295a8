//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha12 stream seeded
//! through [`derive_seed`], so a single master seed fans out into
//! independent, reproducible streams for episode noise, weight init,
//! shuffles and subsampling. Derivation is a pure function of
//! (master, domain tag, index): no global state, no ordering hazards.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; good avalanche behaviour for cheap seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the domain tag bytes.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent seed from a master seed, a domain tag and an index.
pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(domain.as_bytes())) ^ splitmix64(index))
}

/// A ChaCha12 generator for the given (master, domain, index) triple.
pub fn rng_for(master: u64, domain: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, domain, index))
}
