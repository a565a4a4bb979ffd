//! Counter-based random streams.
//!
//! Every randomized routine derives an independent ChaCha8 stream from a
//! `(seed, domain, index)` triple, so the draws for trial `i` never depend on
//! which worker ran it or in what order. Aggregates built from integer counts
//! are therefore bit-identical for any number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the stream families used by different routines so that, for
/// example, pulse `i` and avalanche trial `i` never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Avalanche = 0x6176_616c_616e_6368,
    Pulses = 0x7075_6c73_6573_0000,
    Restarts = 0x7265_7374_6172_7473,
    Noise = 0x6e6f_6973_6500_0000,
}

/// RNG for work item `index` under `seed` in the given domain.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain as u64);
    rng.set_stream(index);
    rng
}
