//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component (sketch rows, client noise, client sampling,
//! local minibatch order) draws from a ChaCha8 stream addressed by a derived
//! key, so results do not depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Sketch = 1,
    Noise = 2,
    Sampling = 3,
    LocalBatches = 4,
    TaskData = 5,
    Partition = 6,
    Probe = 7,
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a sequence of words into one seed.
pub fn derive_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5eed_f00d_u64, |acc, &w| mix64(acc ^ mix64(w)))
}

/// A ChaCha8 stream keyed by `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for `purpose` at `(master, round)`, sub-addressed by `index`
/// (client id, row, ...).
pub fn purpose_stream(purpose: Purpose, master: u64, round: u64, index: u64) -> ChaCha8Rng {
    stream(derive_seed(&[purpose as u64, master, round]), index)
}
