//! Deterministic fan-out of one experiment seed into per-stage seeds.
//!
//! Every randomized stage (splitting, model init, epoch shuffling, pool
//! sampling, bound trials) derives its own seed from the single global
//! seed, a stage tag, and an index. Stages therefore stay decoupled:
//! adding a draw to one stage never shifts the stream of another.

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed for one stage of a run.
pub fn derive(base: u64, stage: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for byte in stage.bytes() {
        h = splitmix64(h ^ u64::from(byte));
    }
    splitmix64(h ^ index)
}
