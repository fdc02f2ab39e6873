//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

pub const GENERATOR: &str = "generator";
pub const TRAINER: &str = "trainer";
pub const SAMPLER: &str = "sampler";
pub const INIT: &str = "init";

/// FNV-1a over the stream name, folded into the root seed with splitmix64.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ h)
}

pub fn substream(root: u64, name: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
