//! Seeded randomness: one master seed fans out into named sub-streams so any
//! stage (data generation, init, training, evaluation) is independently
//! reproducible. Episode and evaluation seeds live in disjoint namespaces,
//! distinguished by the top byte.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespace tag stored in the top byte of derived seeds.
pub const NS_TRAIN: u8 = 0x54;
pub const NS_EVAL: u8 = 0x45;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically mix a seed with a stream name.
pub fn derive(master: u64, name: &str) -> u64 {
    let mut h = splitmix(master);
    for b in name.as_bytes() {
        h = splitmix(h ^ u64::from(*b));
    }
    h
}

/// Mix a seed with an index (splittable counter).
pub fn child(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Tag a derived seed with a namespace prefix byte.
pub fn tag(seed: u64, ns: u8) -> u64 {
    (seed & 0x00ff_ffff_ffff_ffff) | (u64::from(ns) << 56)
}

/// Namespace byte of a tagged seed.
pub fn namespace(seed: u64) -> u8 {
    (seed >> 56) as u8
}

/// RNG for a named sub-stream of the master seed.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, name))
}

/// RNG from an exact (already derived) seed.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
