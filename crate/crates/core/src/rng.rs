//! Counter-based seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named purposes keep streams for different quantities disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Field = 1,
    Covariate = 2,
    Monitors = 3,
    Proxy = 4,
    Health = 5,
    Layout = 6,
    Stage1Samples = 7,
    Stage2Samples = 8,
    Hyper = 9,
}

/// Mixes a master seed with a path of counters into one 64-bit seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(master: u64, replicate: u64, purpose: Stream) -> Rng {
    Rng::seed_from_u64(derive_seed(master, &[replicate, purpose as u64]))
}

/// Sub-stream `index` of a parent seed, for fan-out over samples or tasks.
pub fn substream(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, &[index]))
}
