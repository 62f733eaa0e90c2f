//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream selected by
//! `(master seed, purpose, index)`. The key is derived from the master seed
//! and the purpose tag, the 64-bit stream id is the path (or lattice node)
//! index. A path therefore sees the same numbers no matter which worker
//! thread simulates it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PathRng = ChaCha8Rng;

/// Tags separating the random streams of different estimators, so that
/// estimators run with the same master seed stay independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Naive = 1,
    VarphiStieltjes = 2,
    VarphiFactorized = 3,
    VarphiGradient = 4,
    CrossDerivative = 5,
    Psi = 6,
    Lattice = 7,
    Test = 99,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed, e.g. for the φ and ψ parts of a decomposed
/// estimate or for the i-th query point of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> PathRng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose as u64));
    rng.set_stream(index);
    rng
}
