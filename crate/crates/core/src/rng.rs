//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream selected by
//! `(master seed, domain, a, b)`. A stream is a pure function of its key, so
//! draws never depend on evaluation order or on how work is split across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Keeps streams of different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Weights = 1,
    Biases = 2,
    Mixers = 3,
    Inputs = 4,
    Perturbation = 5,
    Batches = 6,
    Probe = 7,
    Dataset = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for the key `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = splitmix64(splitmix64(splitmix64(domain as u64) ^ a) ^ b);
    rng.set_stream(id);
    rng
}

/// Fills `out` with standard normal draws from the keyed stream.
pub fn fill_normal(seed: u64, domain: Domain, a: u64, b: u64, out: &mut [f64]) {
    let mut rng = stream(seed, domain, a, b);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// `len` standard normal draws from the keyed stream.
pub fn normal_vec(seed: u64, domain: Domain, a: u64, b: u64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    fill_normal(seed, domain, a, b, &mut out);
    out
}

/// Derives a child seed, used when one experiment spawns independent runs.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
