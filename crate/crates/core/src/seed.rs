//! Named seed streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 generator seeded
//! by mixing a root seed with a purpose tag and integer coordinates (round,
//! epoch, client-id hash). The schedule that executes the work never feeds
//! into a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `root` with a tag and coordinates into a new 64-bit seed.
pub fn derive(root: u64, tag: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ fnv1a(tag.as_bytes()));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn rng(root: u64, tag: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tag, coords))
}

/// Per-client stream key: root seed combined with the client-id hash.
pub fn client_stream(root: u64, client_id: &str) -> u64 {
    derive(root, "client", &[fnv1a(client_id.as_bytes())])
}
