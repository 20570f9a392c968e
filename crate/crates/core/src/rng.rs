//! Counter-based random streams.
//!
//! Every stream is a pure function of `(seed, domain, indices)`, so results
//! do not depend on thread count or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated uses of one master seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Perturb = 0x5045_5254,
    Generate = 0x4745_4e45,
    Calibrate = 0x4341_4c49,
    Replicate = 0x5245_504c,
}

#[inline]
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `seed`, `domain` and `indices` into a single 64-bit key.
pub fn derive_key(seed: u64, domain: Domain, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(domain as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Independent generator for `(seed, domain, indices)`.
pub fn stream(seed: u64, domain: Domain, indices: &[u64]) -> ChaCha8Rng {
    let key = derive_key(seed, domain, indices);
    let mut bytes = [0u8; 32];
    let mut s = key;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
