//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream seeded from the
//! run seed plus a stream tag and position, so shuffling, masking and
//! dropout never interfere with each other's sequences.

pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;
pub const STREAM_MASK: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_SWEEP: u64 = 5;
pub const STREAM_INIT: u64 = 6;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of stream tags into a fresh seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    h
}
