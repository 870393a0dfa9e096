//! Named random sub-streams derived from one master seed.
//!
//! Each component draws from `substream(seed, name, index)` so that, for
//! example, the split permutation can change without perturbing the
//! initialization of the model trained on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const AUGMENT: &str = "augment";
pub const SIM: &str = "sim";
pub const DATA: &str = "data";

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
