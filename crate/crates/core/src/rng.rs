//! Deterministic random streams.
//!
//! Every consumer of randomness owns a stream derived from a root seed and a
//! tuple of labels (subject, epoch, run, fold, ...). Streams never depend on
//! evaluation order, which is what makes resumed and repeated runs
//! bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash, used to turn subject ids into stream labels.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Mixes a seed with a list of labels into a new 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix(seed), |acc, &l| splitmix(acc ^ splitmix(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, labels))
}

// Stream-purpose tags, so that e.g. the shuffle stream of epoch 3 never
// collides with the augmentation stream of subject 3.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_SHUFFLE: u64 = 2;
pub(crate) const TAG_VIEWS: u64 = 3;
pub(crate) const TAG_DROPOUT: u64 = 4;
pub(crate) const TAG_HEADS: u64 = 5;
pub(crate) const TAG_FOLDS: u64 = 6;
pub(crate) const TAG_PROBE: u64 = 7;
