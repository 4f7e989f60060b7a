//! Counter-based random streams.
//!
//! Every draw in the crate comes from a stream keyed by a tuple of integers
//! (seed, iteration, field, location, ...). Streams are independent of the
//! order in which they are requested, so serial and parallel evaluation
//! produce identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a key tuple into a single 64-bit stream seed.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(parts))
}

/// Fills `out` with standard normal draws from the stream keyed by `parts`.
pub fn normals_into(parts: &[u64], out: &mut [f64]) {
    let mut rng = stream(parts);
    for o in out.iter_mut() {
        *o = StandardNormal.sample(&mut rng);
    }
}

// Stream domain tags, so unrelated consumers never share a stream.
pub(crate) const TAG_MC: u64 = 1;
pub(crate) const TAG_BATCH: u64 = 2;
pub(crate) const TAG_INIT: u64 = 3;
pub(crate) const TAG_KMEANS: u64 = 4;
pub(crate) const TAG_SYNTH: u64 = 5;
